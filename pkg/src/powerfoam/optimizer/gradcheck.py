"""Central finite differences of the composite loss, evaluated with the
compiled rasterizer and the NumPy losses (independent of the torch replay)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import AdjacencyGraph
from ..rasterizer import raster_pass
from ..render_core import Camera
from ..scene import Scene
from .losses import ContributionRecords, total_loss

FD_REL = 1e-4


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass(frozen=True)
class Coord:
    field: str
    index: tuple

    def __str__(self):
        return f"{self.field}{list(self.index)}"


def all_coords(scene: Scene, cells=None) -> list[Coord]:
    cells = np.flatnonzero(~scene.is_steiner) if cells is None else cells
    out = []
    for i in cells:
        i = int(i)
        out += [Coord("position", (i, a)) for a in range(3)]
        out.append(Coord("radius", (i,)))
        out += [Coord("normal", (i, a)) for a in range(3)]
        out.append(Coord("density", (i,)))
        for k in range(scene.k):
            out += [Coord("uv", (i, k, a)) for a in range(2)]
            out.append(Coord("displacement", (i, k)))
            out += [Coord("values", (i, k, a, c)) for a in range(scene.axes.shape[0]) for c in range(3)]
    out.append(Coord("gamma", ()))
    return out


def step_size(scene: Scene, c: Coord) -> float:
    """Scale-relative step: cell radius for lengths, unit scale otherwise."""
    if c.field in ("position", "radius", "uv", "displacement"):
        return FD_REL * scene.radii[c.index[0]]
    if c.field == "density":
        return FD_REL * max(1.0, abs(float(softplus_inv(scene.densities[c.index[0]]))))
    if c.field == "values":
        return FD_REL * max(1.0, abs(scene.detail_values[c.index]))
    if c.field == "gamma":
        return FD_REL * scene.gamma
    return FD_REL


def perturb(scene: Scene, c: Coord, h: float) -> Scene:
    i = c.index[0] if c.index else None
    if c.field == "position":
        a = scene.positions.copy()
        a[c.index] += h
        return scene.replace(positions=a)
    if c.field == "radius":
        a = scene.radii.copy()
        a[c.index] += h
        return scene.replace(radii=a)
    if c.field == "normal":
        a = scene.normals.copy()
        v = a[i].copy()
        v[c.index[1]] += h
        a[i] = v / np.linalg.norm(v)
        return scene.replace(normals=a)
    if c.field == "density":
        a = scene.densities.copy()
        a[i] = softplus(softplus_inv(a[i]) + h)
        return scene.replace(densities=a)
    if c.field == "uv":
        a = scene.detail_uv.copy()
        a[c.index] += h
        return scene.replace(detail_uv=a)
    if c.field == "displacement":
        a = scene.detail_disp.copy()
        a[c.index] += h
        return scene.replace(detail_disp=a)
    if c.field == "values":
        a = scene.detail_values.copy()
        a[c.index] += h
        return scene.replace(detail_values=a)
    if c.field == "gamma":
        return scene.replace(gamma=scene.gamma + h)
    raise ValueError(c.field)


def numeric_loss(scene: Scene, cech: AdjacencyGraph, cam: Camera, target, lam: dict):
    """Total loss and the discrete signature of the frame."""
    out = raster_pass(scene, cech, cam, record=True)
    img = out.rgb.reshape(cam.height, cam.width, 3)
    rec = ContributionRecords.from_raster(out, scene)
    loss = total_loss(img, target, rec, scene, cech, lam).total
    frame_axes = np.argmin(np.abs(scene.normals), axis=1)
    return loss, (out.rec_i.tobytes(), frame_axes.tobytes())


@dataclass(frozen=True)
class GradCheckResult:
    coords: list
    analytic: np.ndarray
    numeric: np.ndarray
    boundary: np.ndarray  # structure changed within +-h

    def passed(self, rel: float = 1e-3, atol: float = 1e-9) -> np.ndarray:
        err = np.abs(self.analytic - self.numeric)
        scale = np.maximum(np.abs(self.analytic), np.abs(self.numeric))
        return (err <= rel * scale) | (scale <= atol)

    def pass_rate(self, rel: float = 1e-3, atol: float = 1e-9, nonzero_only: bool = False) -> float:
        keep = ~self.boundary
        if nonzero_only:
            keep &= np.maximum(np.abs(self.analytic), np.abs(self.numeric)) > atol
        if not keep.any():
            return 1.0
        return float(self.passed(rel, atol)[keep].mean())


def finite_difference_check(scene: Scene, cech: AdjacencyGraph, cam: Camera, target, lam: dict, grad,
                            coords=None) -> GradCheckResult:
    """Compare ``grad`` (a ``ParamGradient``) with central differences."""
    coords = all_coords(scene) if coords is None else coords
    target = target.pixels if hasattr(target, "pixels") else np.asarray(target)
    _, sig0 = numeric_loss(scene, cech, cam, target, lam)
    ana, num, bnd = [], [], []
    for c in coords:
        h = step_size(scene, c)
        lp, sp = numeric_loss(perturb(scene, c, h), cech, cam, target, lam)
        lm, sm = numeric_loss(perturb(scene, c, -h), cech, cam, target, lam)
        num.append((lp - lm) / (2 * h))
        ana.append(grad.gamma if c.field == "gamma" else getattr(grad, c.field)[c.index])
        bnd.append(sp != sig0 or sm != sig0)
    return GradCheckResult(list(coords), np.array(ana), np.array(num), np.array(bnd))
