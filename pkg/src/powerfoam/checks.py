"""Invariant suite run by ``powerfoam validate`` and the acceptance tests."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .geometry import AdjacencyGraph, alpha_complex, cech_complex, power_dual
from .rasterizer import rasterize, sort_keys
from .raytracer import TraversalStats, trace_image
from .render_core import Camera, look_at, orbit_cameras
from .scene import Scene

RENDER_TOL = 1e-4
TIE_TOL = 1e-9


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def scene_frame(scene: Scene) -> tuple[np.ndarray, float]:
    """Centre and radius of a ball holding every sphere."""
    lo = (scene.positions - scene.radii[:, None]).min(axis=0)
    hi = (scene.positions + scene.radii[:, None]).max(axis=0)
    c = 0.5 * (lo + hi)
    return c, float(np.max(np.linalg.norm(scene.positions - c, axis=1) + scene.radii))


def random_cameras(scene: Scene, n: int, seed: int, size: int = 64, model: str = "pinhole",
                   inside_fraction: float = 0.0) -> list[Camera]:
    """Cameras at random directions around the scene looking near its centre;
    a fraction may sit inside the scene's bounding ball."""
    rng = np.random.default_rng(seed)
    c, ext = scene_frame(scene)
    cams = []
    for k in range(n):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        dist = ext * (rng.uniform(0.1, 0.8) if rng.uniform() < inside_fraction else rng.uniform(1.6, 2.4))
        eye = c + dist * u
        target = c + 0.2 * ext * rng.normal(size=3)
        pose = look_at(eye, target, up=rng.normal(size=3))
        if model == "pinhole":
            f = 0.5 * size / np.tan(np.radians(rng.uniform(40, 75)) / 2)
            cams.append(Camera.pinhole(f, f, size / 2, size / 2, pose, size, size))
        else:
            f = 0.5 * size / np.radians(rng.uniform(60, 170) / 2)
            cams.append(Camera.fisheye(f, size / 2, size / 2, pose, size, size))
    return cams


def max_render_difference(scene: Scene, cams, cech: AdjacencyGraph | None = None,
                          dual: AdjacencyGraph | None = None) -> list[float]:
    cech = cech_complex(scene.pr) if cech is None else cech
    dual = power_dual(scene.pr) if dual is None else dual
    out = []
    for cam in cams:
        a = rasterize(scene, cech, cam).pixels
        b, _ = trace_image(scene, dual, cam)
        out.append(float(np.abs(a - b.pixels).max()))
    return out


def random_rays(scene: Scene, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Origins uniform in the scene's bounding ball grown 1.5x, directions
    uniform on the sphere."""
    rng = np.random.default_rng(seed)
    c, ext = scene_frame(scene)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    o = c + 1.5 * ext * u * rng.uniform(size=(n, 1)) ** (1 / 3)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return o, d


def painter_order_violations(scene: Scene, cech: AdjacencyGraph, origins, directions,
                             batch: int = 4096) -> tuple[int, int, int]:
    """Count rays whose bounded-cell entry order disagrees with ascending
    power of the ray origin. Returns ``(violations, checked, excluded)``; rays
    with entry parameters or keys within ``TIE_TOL`` of each other are
    excluded as degenerate."""
    viol = checked = excluded = 0
    n = scene.n_cells
    for s in range(0, len(origins), batch):
        o = np.ascontiguousarray(origins[s:s + batch])
        d = np.ascontiguousarray(directions[s:s + batch])
        lo = np.zeros((len(o), n))
        hi = np.zeros((len(o), n))
        K.all_cell_intervals(o, d, scene.positions, scene.radii, cech.indptr, cech.indices, 0.0, np.inf, lo, hi)
        for r in range(len(o)):
            hit = np.flatnonzero(hi[r] > lo[r])
            if len(hit) < 2:
                continue
            t_in = lo[r, hit]
            keys = sort_keys(o[r], scene.positions[hit], scene.radii[hit])
            order = np.argsort(t_in, kind="stable")
            t_sorted, k_sorted = t_in[order], keys[order]
            if np.any(np.diff(t_sorted) <= TIE_TOL) or np.any(np.abs(np.diff(np.sort(keys))) <= TIE_TOL):
                excluded += 1
                continue
            checked += 1
            if np.any(np.diff(k_sorted) <= 0.0):
                viol += 1
    return viol, checked, excluded


def run_checks(scene: Scene, seed: int = 0, n_cameras: int = 8, size: int = 64,
               n_rays: int = 2000) -> list[CheckResult]:
    out = []
    cech = cech_complex(scene.pr)
    dual = power_dual(scene.pr)
    alpha = alpha_complex(scene.pr, dual)
    out.append(CheckResult("alpha subset of cech", alpha.issubset(cech),
                           f"{len(alpha)} alpha edges, {len(cech)} cech edges"))
    out.append(CheckResult("alpha subset of power dual", alpha.issubset(dual),
                           f"{len(alpha)} alpha edges, {len(dual)} dual edges"))
    cams = random_cameras(scene, n_cameras, seed, size)
    diffs = max_render_difference(scene, cams, cech, dual)
    worst = max(diffs) if diffs else 0.0
    out.append(CheckResult("raster equals trace", worst <= RENDER_TOL,
                           f"max |raster - trace| = {worst:.3g} over {len(cams)} cameras at {size}x{size}"))
    o, d = random_rays(scene, n_rays, seed)
    v, c, e = painter_order_violations(scene, cech, o, d)
    out.append(CheckResult("pop-free ordering", v == 0, f"{v} violations in {c} rays ({e} degenerate excluded)"))
    return out


def benchmark_cameras(scene: Scene, n: int = 8, size: int = 64) -> list[Camera]:
    """Canned orbit used to count ray-cell intersections: ``n`` pinhole views
    of ``size`` pixels around the centroid of the cell positions."""
    c = scene.positions.mean(axis=0)
    ext = float(np.linalg.norm(scene.positions - c, axis=1).max()) or 1.0
    return orbit_cameras(c, 2.5 * ext, n, width=size, height=size, fov_deg=60.0)


def mean_intersections(scene: Scene, cams, dual: AdjacencyGraph | None = None) -> float:
    """Mean number of cells walked per ray over ``cams``."""
    dual = power_dual(scene.pr) if dual is None else dual
    stats = TraversalStats(0, 0)
    for cam in cams:
        stats = stats + trace_image(scene, dual, cam)[1]
    return stats.mean_cells_per_ray
