"""Training losses (NumPy versions) and their weight schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..geometry import AdjacencyGraph
from ..render_core import Image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class Schedule:
    """Exponential interpolation from ``initial`` (first step) to ``final``
    (last step)."""

    initial: float
    final: float

    def __post_init__(self):
        if self.initial < 0 or self.final < 0:
            raise ValueError("loss weights must be non-negative")
        if (self.initial == 0) != (self.final == 0):
            raise ValueError("an exponential schedule cannot start or end at zero alone")

    def __call__(self, step: int, total: int) -> float:
        if self.initial == self.final or total <= 1:
            return self.initial
        frac = min(max(step / (total - 1), 0.0), 1.0)
        if frac == 1.0:
            return self.final
        return self.initial * (self.final / self.initial) ** frac


@dataclass(frozen=True)
class LossWeights:
    ssim: Schedule = field(default_factory=lambda: Schedule(0.2, 0.2))
    normal: Schedule = field(default_factory=lambda: Schedule(0.1, 0.01))
    sparse: Schedule = field(default_factory=lambda: Schedule(0.1, 1e-4))
    connect: Schedule = field(default_factory=lambda: Schedule(1e-4, 1e-7))

    def at(self, step: int, total: int) -> dict:
        return {k: getattr(self, k)(step, total) for k in ("ssim", "normal", "sparse", "connect")}

    @classmethod
    def from_dict(cls, doc: dict) -> "LossWeights":
        kw = {}
        for k, v in doc.items():
            if k not in ("ssim", "normal", "sparse", "connect"):
                raise ValueError(f"unknown loss weight {k!r}")
            kw[k] = Schedule(float(v), float(v)) if np.isscalar(v) else Schedule(float(v[0]), float(v[1]))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: [s.initial, s.final] for k, s in self.__dict__.items()}


class LossBreakdown(NamedTuple):
    total: float
    rgb: float
    ssim: float
    normal: float
    sparse: float
    connect: float


@dataclass(frozen=True, eq=False)
class ContributionRecords:
    """One entry per (cell, ray) pair that contributed to a rendered image."""

    transmittance: np.ndarray  # (S,) before the segment
    alpha: np.ndarray          # (S,)
    normal: np.ndarray         # (S, 3) cell normal
    direction: np.ndarray      # (S, 3) ray direction
    n_rays: int
    cell: np.ndarray | None = None

    @classmethod
    def from_raster(cls, out, scene) -> "ContributionRecords":
        from .. import _kernels as K
        cell = out.rec_i[:, K.R_CELL]
        return cls(out.rec_f[:, K.F_T], out.rec_f[:, K.F_ALPHA], scene.normals[cell],
                   out.directions[out.rec_i[:, K.R_PIX]], len(out.origins), cell)


def _pixels(img):
    return img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def loss_rgb(render, target) -> float:
    a, b = _pixels(render), _pixels(target)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _blur_valid(x, g):
    k = len(g)
    x = np.tensordot(sliding_window_view(x, k, axis=0), g, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(x, k, axis=1), g, axes=([-1], [0]))


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM over the fully covered (valid) region, per channel."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[1]}x{a.shape[0]}")
    g = gaussian_window()
    mu_a, mu_b = _blur_valid(a, g), _blur_valid(b, g)
    saa = _blur_valid(a * a, g) - mu_a ** 2
    sbb = _blur_valid(b * b, g) - mu_b ** 2
    sab = _blur_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
            / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)))


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def loss_ssim(render, target) -> float:
    return 1.0 - ssim(render, target)


def loss_normal(rec: ContributionRecords) -> float:
    dots = np.einsum("ij,ij->i", rec.normal, rec.direction)
    if rec.n_rays == 0:
        return 0.0
    return float(np.sum(rec.transmittance * rec.alpha * np.maximum(dots, 0.0) ** 2) / rec.n_rays)


def loss_sparse(rec: ContributionRecords) -> float:
    if rec.n_rays == 0:
        return 0.0
    return float(np.sum(rec.transmittance * rec.alpha) / rec.n_rays)


def loss_connect(scene, cech: AdjacencyGraph) -> float:
    if len(cech.edges) == 0:
        return 0.0
    i, j = cech.edges[:, 0], cech.edges[:, 1]
    d = np.linalg.norm(scene.positions[i] - scene.positions[j], axis=1)
    return float(np.sum(np.maximum(scene.radii[i] + scene.radii[j] - d, 0.0) ** 2))


def psnr(render, target) -> float:
    mse = loss_rgb(render, target)
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def total_loss(render, target, rec: ContributionRecords, scene, cech, lam: dict) -> LossBreakdown:
    terms = dict(rgb=loss_rgb(render, target), ssim=loss_ssim(render, target), normal=loss_normal(rec),
                 sparse=loss_sparse(rec), connect=loss_connect(scene, cech))
    total = (terms["rgb"] + lam["ssim"] * terms["ssim"] + lam["normal"] * terms["normal"]
             + lam["sparse"] * terms["sparse"] + lam["connect"] * terms["connect"])
    return LossBreakdown(total=total, **terms)
