"""Fitting a scene to posed images: Adam updates through the differentiable
rasterizer, error-driven densification and contribution-based pruning."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .. import _kernels as K
from ..geometry import cech_complex
from ..rasterizer import cull_to_tiles, raster_pass
from ..render_core import Camera, Image
from ..scene import DEFAULT_DETAILS, NUM_AXES, Scene, default_temperature, fibonacci_axes, ring_uv
from .diff import ParamGradient, differentiable_frame
from .gradcheck import softplus, softplus_inv
from .losses import LossWeights, psnr

RADIUS_FLOOR = 1e-6


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# per-cell statistics


@dataclass(eq=False)
class PrimitiveStats:
    error_ema: np.ndarray
    contribution_ema: np.ndarray
    decay: float = 0.9

    @classmethod
    def zeros(cls, n: int, decay: float = 0.9) -> "PrimitiveStats":
        return cls(np.zeros(n), np.zeros(n), decay)

    def update(self, cells, error, contribution) -> None:
        """Blend in one step's values for ``cells`` (the cells in view)."""
        a = self.decay
        self.error_ema[cells] = a * self.error_ema[cells] + (1 - a) * np.asarray(error)
        self.contribution_ema[cells] = a * self.contribution_ema[cells] + (1 - a) * np.asarray(contribution)

    def select(self, keep) -> "PrimitiveStats":
        return PrimitiveStats(self.error_ema[keep].copy(), self.contribution_ema[keep].copy(), self.decay)

    def append(self, error, contribution) -> "PrimitiveStats":
        return PrimitiveStats(np.concatenate([self.error_ema, error]),
                              np.concatenate([self.contribution_ema, contribution]), self.decay)


def densify_with_stats(scene: Scene, stats: PrimitiveStats, count: int, rng: np.random.Generator):
    """``densify`` that also returns the extended statistics and the parent
    index of every new cell."""
    live = np.flatnonzero(~scene.is_steiner)
    err = stats.error_ema[live]
    if count <= 0 or len(live) == 0 or not err.sum() > 0:
        return scene, stats, np.zeros(0, dtype=np.int64)
    parents = live[rng.choice(len(live), size=count, replace=True, p=err / err.sum())]
    r = scene.radii[parents]
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offs = dirs * (0.5 * r * rng.uniform(size=count) ** (1.0 / 3.0))[:, None]
    child = scene.select(parents)
    rc = 0.7 * r
    uv = child.detail_uv.copy()
    norm = np.linalg.norm(uv, axis=2, keepdims=True)
    uv *= np.minimum(1.0, rc[:, None, None] / np.maximum(norm, 1e-300))
    disp = np.clip(child.detail_disp, -rc[:, None], rc[:, None])
    child = child.replace(positions=scene.positions[parents] + offs, radii=rc, detail_uv=uv, detail_disp=disp)
    stats = stats.append(0.5 * stats.error_ema[parents], stats.contribution_ema[parents].copy())
    return scene.concat(child), stats, parents


def densify(scene: Scene, stats: PrimitiveStats, count: int, rng: np.random.Generator) -> Scene:
    """Add ``count`` children of parents drawn in proportion to their error EMA."""
    return densify_with_stats(scene, stats, count, rng)[0]


def prune_mask(scene: Scene, stats: PrimitiveStats, threshold: float) -> np.ndarray:
    """Cells to keep: Steiner cells and cells whose contribution EMA is at
    least ``threshold``."""
    if threshold < 0:
        raise ValueError("prune threshold must be >= 0")
    return scene.is_steiner | ~(stats.contribution_ema < threshold)


def prune(scene: Scene, stats: PrimitiveStats, threshold: float) -> Scene:
    return scene.select(prune_mask(scene, stats, threshold))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    lr_position: float = 1e-3
    lr_radius: float = 1e-3
    lr_normal: float = 1e-2
    lr_density: float = 5e-2
    lr_uv: float = 1e-3
    lr_displacement: float = 1e-3
    lr_values: float = 1e-2
    lr_gamma: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-12
    ema_decay: float = 0.9
    prune_threshold: float = 0.01
    densify_every: int = 100
    densify_start: float = 0.1
    densify_end: float = 0.8
    densify_fraction: float = 0.05
    max_cells: int = 4000
    downsample_fraction: float = 0.1
    downsample_factor: int = 2
    log_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        kw = dict(doc)
        defaults = cls()
        for name, value in kw.items():
            if name == "weights":
                continue
            want = type(getattr(defaults, name))
            ok = isinstance(value, want) or (want is float and isinstance(value, int))
            if not ok or isinstance(value, bool):
                raise ValueError(f"config field {name!r}: expected {want.__name__}, got {value!r}")
            kw[name] = want(value)
        if "weights" in kw:
            if not isinstance(kw["weights"], dict):
                raise ValueError("config field 'weights': expected an object")
            kw["weights"] = LossWeights.from_dict(kw["weights"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


# ---------------------------------------------------------------------------
# parameters and Adam


PARAMS = ("position", "radius", "normal", "density", "uv", "displacement", "values", "gamma")


def scene_to_params(scene: Scene) -> dict:
    return {
        "position": scene.positions.copy(),
        "radius": softplus_inv(np.maximum(scene.radii - RADIUS_FLOOR, 1e-12)),
        "normal": scene.normals.copy(),
        "density": softplus_inv(np.maximum(scene.densities, 1e-12)),
        "uv": scene.detail_uv.copy(),
        "displacement": scene.detail_disp.copy(),
        "values": scene.detail_values.copy(),
        "gamma": np.array([scene.gamma]),
    }


def params_to_scene(p: dict, like: Scene) -> Scene:
    rad = RADIUS_FLOOR + softplus(p["radius"])
    nrm = p["normal"] / np.linalg.norm(p["normal"], axis=1, keepdims=True)
    dens = np.where(like.is_steiner, 0.0, softplus(p["density"]))
    return like.replace(positions=p["position"], radii=rad, normals=nrm, densities=dens,
                        detail_uv=p["uv"], detail_disp=p["displacement"], detail_values=p["values"],
                        gamma=float(p["gamma"][0]))


def _raw_gradients(g: ParamGradient, scene: Scene) -> dict:
    """Gradients w.r.t. the unconstrained parameters."""
    frozen = scene.is_steiner
    out = {
        "position": g.position.copy(),
        # radius = floor + softplus(raw): d/d raw = 1 - exp(-(radius - floor))
        "radius": g.radius * -np.expm1(-(scene.radii - RADIUS_FLOOR)),
        "normal": g.normal.copy(), "density": g.density.copy(), "uv": g.uv.copy(),
        "displacement": g.displacement.copy(), "values": g.values.copy(),
        "gamma": np.array([g.gamma]),
    }
    for k in PARAMS[:-1]:
        out[k][frozen] = 0.0
    return out


class Adam:
    """Adam with per-parameter learning rates and resizable per-cell moments."""

    def __init__(self, params: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-12):
        self.lrs, self.b1, self.b2, self.eps = lrs, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def select(self, keep) -> None:
        for k in PARAMS[:-1]:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]

    def grow(self, n: int) -> None:
        for k in PARAMS[:-1]:
            pad = np.zeros((n,) + self.m[k].shape[1:])
            self.m[k] = np.concatenate([self.m[k], pad])
            self.v[k] = np.concatenate([self.v[k], pad])


def _project(p: dict) -> None:
    """Keep parameters inside the valid scene domain after an update."""
    p["normal"] /= np.linalg.norm(p["normal"], axis=1, keepdims=True)
    np.maximum(p["values"], 0.0, out=p["values"])
    r = RADIUS_FLOOR + softplus(p["radius"])
    np.clip(p["displacement"], -r[:, None], r[:, None], out=p["displacement"])
    norm = np.linalg.norm(p["uv"], axis=2, keepdims=True)
    p["uv"] *= np.minimum(1.0, r[:, None, None] / np.maximum(norm, 1e-300))
    p["gamma"] = np.maximum(p["gamma"], 1e-3)


# ---------------------------------------------------------------------------
# initialization


def init_scene(points, seed: int = 0, noise: float = 0.0, density: float = 0.1, color: float = 0.5,
               k: int = DEFAULT_DETAILS, background=(0.0, 0.0, 0.0)) -> Scene:
    """Starting scene from a point sample: jittered positions, radius equal to
    the nearest-neighbour distance, uniform low density, random normals and
    grey radiance."""
    rng = np.random.default_rng(seed)
    pos = np.asarray(points, dtype=np.float64) + noise * rng.normal(size=np.shape(points))
    n = len(pos)
    dist, _ = cKDTree(pos).query(pos, k=2)
    rad = dist[:, 1]
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    uv = np.stack([ring_uv(k, r) for r in rad])
    return Scene(positions=pos, radii=rad, normals=nrm, densities=np.full(n, density),
                 is_steiner=np.zeros(n, dtype=bool), detail_uv=uv, detail_disp=np.zeros((n, k)),
                 detail_values=np.full((n, k, NUM_AXES, 3), color), temperature=default_temperature(rad),
                 background=background, axes=fibonacci_axes(), gamma=4.0)


# ---------------------------------------------------------------------------
# training loop


def downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    h, w = pixels.shape[0] // factor, pixels.shape[1] // factor
    return pixels[:h * factor, :w * factor].reshape(h, factor, w, factor, 3).mean(axis=(1, 3))


def _frame_stats(scene, cam, res, target):
    """Cells in view, and per-cell error / contribution for this frame."""
    tiles = cull_to_tiles(cam, scene.pr, cells=np.flatnonzero(~scene.is_steiner))
    visible = np.unique(tiles.indices)
    ri = res.raster.rec_i
    cell = ri[:, K.R_CELL]
    resid = np.abs(res.image - target).mean(axis=2).reshape(-1)
    err = np.bincount(cell, weights=res.weight * resid[ri[:, K.R_PIX]], minlength=scene.n_cells)
    contrib = np.zeros(scene.n_cells)
    np.maximum.at(contrib, cell, res.weight)
    return visible, err[visible], contrib[visible]


def fit(scene0: Scene, views: Sequence[tuple[Camera, Image]], config: TrainConfig | None = None,
        log: Callable[[dict], None] | None = None) -> Scene:
    """Optimize ``scene0`` against posed target images."""
    cfg = config or TrainConfig()
    if len(views) < 2:
        raise ValueError("fit needs at least two views")
    if cfg.iterations <= 0:
        return scene0
    rng = np.random.default_rng(cfg.seed)
    scene = scene0
    params = scene_to_params(scene)
    lrs = {k: getattr(cfg, f"lr_{k}") for k in PARAMS}
    opt = Adam(params, lrs, cfg.beta1, cfg.beta2, cfg.adam_eps)
    stats = PrimitiveStats.zeros(scene.n_cells, cfg.ema_decay)
    total = cfg.iterations
    d_start, d_end = int(cfg.densify_start * total), int(cfg.densify_end * total)
    low_res_until = int(cfg.downsample_fraction * total)
    order: list[int] = []
    for it in range(total):
        if not order:
            order = list(rng.permutation(len(views)))
        cam, target = views[order.pop(0)]
        tgt = target.pixels
        if it < low_res_until and cfg.downsample_factor > 1:
            cam = cam.scaled(cfg.downsample_factor)
            tgt = downsample(tgt, cfg.downsample_factor)
        lam = cfg.weights.at(it, total)
        cech = cech_complex(scene.pr)
        res = differentiable_frame(scene, cech, cam, tgt, lam)
        if not math.isfinite(res.losses.total) or not res.grad.is_finite():
            raise NonFiniteLossError(f"non-finite loss or gradient at iteration {it}")
        opt.step(params, _raw_gradients(res.grad, scene))
        _project(params)
        visible, err, contrib = _frame_stats(scene, cam, res, tgt)
        stats.update(visible, err, contrib)
        scene = params_to_scene(params, scene)

        if it > 0 and it % cfg.densify_every == 0 and d_start <= it < d_end:
            keep = prune_mask(scene, stats, cfg.prune_threshold)
            if not keep.all():
                scene, stats = scene.select(keep), stats.select(keep)
                params = {k: (v[keep] if k != "gamma" else v) for k, v in params.items()}
                opt.select(keep)
            room = cfg.max_cells - scene.n_cells
            count = min(room, int(math.ceil(cfg.densify_fraction * np.count_nonzero(~scene.is_steiner))))
            if count > 0:
                n_before = scene.n_cells
                scene, stats, _ = densify_with_stats(scene, stats, count, rng)
                new = scene_to_params(scene.select(np.arange(n_before, scene.n_cells)))
                params = {k: (np.concatenate([v, new[k]]) if k != "gamma" else v) for k, v in params.items()}
                opt.grow(count)

        if log is not None and (it % cfg.log_every == 0 or it == total - 1):
            rec = {"iteration": it, **res.losses._asdict(), "psnr": psnr(res.image, tgt),
                   "cells": scene.n_cells}
            log(rec)
    return scene


def json_logger(stream=None, path=None) -> Callable[[dict], None]:
    """Line-delimited JSON progress records to a stream and/or a file."""
    fh = open(path, "w", encoding="ascii") if path is not None else None

    def emit(rec: dict) -> None:
        line = json.dumps(rec, allow_nan=True)
        if stream is not None:
            print(line, file=stream, flush=True)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()

    emit.close = (lambda: fh.close()) if fh is not None else (lambda: None)
    return emit
