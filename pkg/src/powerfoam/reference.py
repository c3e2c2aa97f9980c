"""Slow reference renderers used as test oracles.

``fine_step_ray`` ignores all cell adjacency: it marches the ray in small
steps, picks the power-minimal site at every sample and tests sphere and
dipole membership point-wise. ``segment_ray`` follows the renderer pipeline
one cell at a time with the readable scalar functions.
"""

from __future__ import annotations

import numpy as np

from .geometry import Ray, RayInterval, cell_interval, sphere_interval
from .render_core import EARLY_STOP_T, SegmentSample, integrate_segments
from .scene import Scene, displacement_at, occupied_span, radiance_at, shading_point


def _merged_chords(lo, hi):
    order = np.argsort(lo)
    out = []
    for a, b in zip(lo[order], hi[order]):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def fine_step_ray(scene: Scene, ray: Ray, near: float = 0.0, far: float = np.inf,
                  dt: float = 1e-4, return_cells: bool = False):
    """Brute-force colour of one ray (midpoint samples no longer than ``dt``).

    Only spheres the ray actually crosses can own a point with negative
    power, so they are the only candidates the argmin needs to consider.
    With ``return_cells`` also returns the sample parameters and the
    power-minimal cell at each (``-1`` outside every sphere).
    """
    o, d = np.asarray(ray.origin, dtype=np.float64), np.asarray(ray.direction, dtype=np.float64)
    hit, lo, hi = [], [], []
    for i in range(scene.n_cells):
        a, b = sphere_interval(o, d, scene.positions[i], scene.radii[i])
        a, b = max(a, near, 0.0), min(b, far)
        if b > a:
            hit.append(i)
            lo.append(a)
            hi.append(b)
    bg = scene.background
    if not hit:
        return (bg.copy(), 1.0, np.zeros(0), np.zeros(0, dtype=np.int64)) if return_cells else (bg.copy(), 1.0)
    hit = np.asarray(hit)
    ts, ws = [], []
    for a, b in _merged_chords(np.asarray(lo), np.asarray(hi)):
        m = max(1, int(np.ceil((b - a) / dt)))
        h = (b - a) / m
        ts.append(a + (np.arange(m) + 0.5) * h)
        ws.append(np.full(m, h))
    t = np.concatenate(ts)
    w = np.concatenate(ws)
    y = o + t[:, None] * d
    pw = ((y[:, None, :] - scene.positions[hit][None]) ** 2).sum(-1) - scene.radii[hit][None] ** 2
    k = np.argmin(pw, axis=1)
    inside = pw[np.arange(len(t)), k] <= 0.0
    cell = np.where(inside, hit[k], -1)

    sigma = np.zeros(len(t))
    rgb = np.zeros((len(t), 3))
    for i in np.unique(cell[cell >= 0]):
        c = scene.cell(int(i))
        p, n = c.site.position, c.dipole.normal
        sel = cell == i
        dn = float(d @ n)
        if abs(dn) <= 1e-12:
            x0 = o + t[sel][0] * d
            disp = displacement_at(c, x0 - ((x0 - p) @ n) * n, scene.temperature)
        else:
            disp = displacement_at(c, o + (((p - o) @ n) / dn) * d, scene.temperature)
        occ = sel & (((y - p) @ n) <= disp)
        if not occ.any():
            continue
        if abs(dn) <= 1e-12:
            # colour at the start of each occupied run
            idx = np.flatnonzero(occ)
            for run in np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1):
                x = y[run[0]] - 0.5 * w[run[0]] * d
                rgb[run] = radiance_at(c, x, d, scene.temperature)
        else:
            x = o + ((((p - o) @ n) + disp) / dn) * d
            rgb[occ] = radiance_at(c, x, d, scene.temperature)
        sigma[occ] = c.dipole.density
    alpha = 1.0 - np.exp(-sigma * w)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
    color = (trans[:-1, None] * alpha[:, None] * rgb).sum(0) + trans[-1] * bg
    if return_cells:
        return color, float(trans[-1]), t, cell
    return color, float(trans[-1])


def ray_segments(scene: Scene, ray: Ray, neighbors, near: float = 0.0, far: float = np.inf):
    """Occupied segments of every non-empty cell along ``ray`` sorted by entry,
    as ``(t_in, SegmentSample)`` pairs. ``neighbors(i)`` lists the candidate
    neighbours of cell ``i``."""
    out = []
    for i in range(scene.n_cells):
        if scene.densities[i] <= 0.0:
            continue
        iv = cell_interval(ray, i, scene.pr, neighbors(i), max(near, 0.0), far)
        if iv.empty:
            continue
        c = scene.cell(i)
        span = occupied_span(c, ray, iv, scene.temperature)
        if span.interval.empty:
            continue
        col = radiance_at(c, shading_point(ray, span), ray.direction, scene.temperature)
        out.append((span.interval.t_in, SegmentSample(i, span.interval.length, c.dipole.density, col)))
    out.sort(key=lambda s: s[0])
    return out


def segment_ray(scene: Scene, ray: Ray, neighbors, near: float = 0.0, far: float = np.inf):
    """Colour and transmittance of one ray composited from ``ray_segments``."""
    segs = [s for _, s in ray_segments(scene, ray, neighbors, near, far)]
    return integrate_segments(segs, scene.background, EARLY_STOP_T)
