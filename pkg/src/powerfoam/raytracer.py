"""Cell-to-cell ray traversal through the power diagram and Steiner-point
insertion to shorten walks through empty space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import AdjacencyGraph, Ray
from .render_core import Camera, Image
from .scene import Scene

STEINER_ITERATIONS = 6
STEINER_WINDOW = (2.0, 6.0)


class TraversalDivergenceError(RuntimeError):
    """A ray exceeded the traversal step budget."""

    def __init__(self, message: str, ray_index: int | None = None, pixel=None):
        super().__init__(message)
        self.ray_index = ray_index
        self.pixel = pixel


@dataclass(frozen=True)
class TraversalStats:
    rays: int
    cells_visited: int

    @property
    def mean_cells_per_ray(self) -> float:
        return self.cells_visited / self.rays if self.rays else 0.0

    def __add__(self, other: "TraversalStats") -> "TraversalStats":
        return TraversalStats(self.rays + other.rays, self.cells_visited + other.cells_visited)


def step_budget(n_cells: int) -> int:
    return int(10 * n_cells ** (1.0 / 3.0) + 1000)


def trace_rays(scene: Scene, dual: AdjacencyGraph, origins, directions, near: float = 0.0,
               far: float = np.inf, budget: int | None = None):
    """Trace a batch of rays; returns ``(rgb, transmittance, visited)``.

    ``dual`` must be the power dual of every cell, Steiner cells included.
    """
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape))
    n = len(d)
    rgb = np.zeros((n, 3))
    tr = np.zeros(n)
    visited = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    if budget is None:
        budget = step_budget(scene.n_cells)
    K.trace_kernel(o, d, *scene.kernel_args(), dual.indptr, dual.indices, scene.world_box,
                   float(near), float(far), scene.background, int(budget), rgb, tr, visited, status)
    bad = np.flatnonzero(status)
    if len(bad):
        k = int(bad[0])
        raise TraversalDivergenceError(
            f"ray {k} (origin {o[k].tolist()}, direction {d[k].tolist()}) exceeded {budget} traversal steps",
            ray_index=k)
    return rgb, tr, visited


def trace_ray(scene: Scene, dual: AdjacencyGraph, ray: Ray, near: float = 0.0,
              far: float = np.inf) -> tuple[np.ndarray, int]:
    """Colour of one ray and the number of cells it walked through."""
    rgb, _, visited = trace_rays(scene, dual, ray.origin, ray.direction, near, far)
    return rgb[0], int(visited[0])


def trace_image(scene: Scene, dual: AdjacencyGraph, cam: Camera) -> tuple[Image, TraversalStats]:
    o, d = cam.ray_grid()
    try:
        rgb, _, visited = trace_rays(scene, dual, o, d, cam.near, cam.far)
    except TraversalDivergenceError as e:
        py, px = divmod(e.ray_index, cam.width)
        raise TraversalDivergenceError(f"pixel ({px}, {py}): {e}", e.ray_index, (px, py)) from e
    img = Image(cam.width, cam.height, rgb.reshape(cam.height, cam.width, 3))
    return img, TraversalStats(len(d), int(visited.sum()))


# ---------------------------------------------------------------------------
# Steiner points


def steiner_accept(r_hat: float, r_near: float) -> bool:
    lo, hi = STEINER_WINDOW
    return lo * r_near <= r_hat <= hi * r_near


def insert_steiner(scene: Scene, seed: int = 0, iterations: int = STEINER_ITERATIONS) -> Scene:
    """Append zero-density cells in empty regions.

    Each round draws as many candidates as there are cells from a normal
    distribution fitted to the cell positions. A candidate survives if it
    lies outside every sphere and its gap to the power-nearest sphere is
    between 2 and 6 times that sphere's radius; it becomes a cell whose
    radius is that gap. Candidates are tested in order against the scene as
    it stood at the start of the round plus earlier survivors of the round.
    """
    rng = np.random.default_rng(seed)
    pos = scene.positions.copy()
    rad = scene.radii.copy()
    n0 = len(rad)
    for _ in range(iterations):
        if len(rad) == 0:
            break
        mean = pos.mean(axis=0)
        std = pos.std(axis=0)
        cand = rng.normal(mean, std, size=(len(rad), 3))
        # power of each candidate against the round's starting cells, in chunks
        best = np.empty(len(cand))
        arg = np.empty(len(cand), dtype=np.int64)
        for s in range(0, len(cand), 1024):
            c = cand[s:s + 1024]
            pw = ((c[:, None, :] - pos[None]) ** 2).sum(-1) - rad[None] ** 2
            arg[s:s + 1024] = np.argmin(pw, axis=1)
            best[s:s + 1024] = pw[np.arange(len(c)), arg[s:s + 1024]]
        new_p: list[np.ndarray] = []
        new_r: list[float] = []
        for c, b, a in zip(cand, best, arg):
            near_p, near_r, near_pw = pos[a], rad[a], b
            if new_p:
                pw = ((np.asarray(new_p) - c) ** 2).sum(1) - np.asarray(new_r) ** 2
                j = int(np.argmin(pw))
                if pw[j] < near_pw:
                    near_p, near_r, near_pw = new_p[j], new_r[j], pw[j]
            if near_pw <= 0.0:
                continue  # inside a sphere
            r_hat = float(np.linalg.norm(c - near_p)) - near_r
            if steiner_accept(r_hat, near_r):
                new_p.append(c)
                new_r.append(r_hat)
        if new_p:
            pos = np.concatenate([pos, np.asarray(new_p)])
            rad = np.concatenate([rad, np.asarray(new_r)])
    if len(rad) == n0:
        return scene
    return scene.concat(scene.steiner_cells(pos[n0:], rad[n0:]))
