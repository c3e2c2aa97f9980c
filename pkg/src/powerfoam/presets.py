"""Deterministic synthetic scenes: random test scenes and the named presets."""

from __future__ import annotations

import numpy as np

from .scene import DEFAULT_DETAILS, NUM_AXES, Scene, default_temperature, fibonacci_axes, ring_uv

PRESETS = ("boxes", "shell", "sparse")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _make(pos, rad, nrm, dens, colors, rng, k=DEFAULT_DETAILS, disp_scale=0.0, view_var=0.0,
          background=(0.0, 0.0, 0.0)) -> Scene:
    """Assemble a scene; ``colors`` is (N, 3) base radiance per cell."""
    n = len(rad)
    uv = np.stack([ring_uv(k, r) for r in rad]) if n else np.zeros((0, k, 2))
    disp = disp_scale * rad[:, None] * rng.uniform(-1.0, 1.0, size=(n, k))
    vals = np.broadcast_to(colors[:, None, None, :], (n, k, NUM_AXES, 3)).copy()
    if view_var:
        vals *= 1.0 + view_var * rng.uniform(-1.0, 1.0, size=(n, k, NUM_AXES, 1))
    return Scene(positions=pos, radii=rad, normals=nrm, densities=dens, is_steiner=np.zeros(n, dtype=bool),
                 detail_uv=uv, detail_disp=disp, detail_values=np.clip(vals, 0.0, None),
                 temperature=default_temperature(rad) if n else 1.0, background=background,
                 axes=fibonacci_axes(), gamma=4.0)


def random_scene(n: int, seed: int, *, extent: float = 1.0, radius=(0.15, 0.35), density=(0.5, 4.0),
                 k: int = DEFAULT_DETAILS, disp_scale: float = 0.5, view_var: float = 0.5) -> Scene:
    """``n`` cells uniform in ``[-extent, extent]^3`` with random dipoles,
    displacements and view-dependent colours; spheres overlap heavily."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-extent, extent, size=(n, 3))
    rad = rng.uniform(*radius, size=n) * extent
    nrm = _unit(rng.normal(size=(n, 3)))
    dens = rng.uniform(*density, size=n) / extent
    col = rng.uniform(0.05, 1.0, size=(n, 3))
    return _make(pos, rad, nrm, dens, col, rng, k, disp_scale, view_var)


SLABS = (
    # centre, half extents, colour
    ((-0.45, 0.0, -0.35), (0.35, 0.6, 0.25), (0.85, 0.15, 0.1)),
    ((0.45, -0.25, 0.0), (0.3, 0.3, 0.6), (0.1, 0.7, 0.2)),
    ((0.2, 0.5, 0.35), (0.55, 0.2, 0.2), (0.15, 0.25, 0.9)),
)


def _slab_cells(center, half, spacing, rng):
    center, half = np.asarray(center), np.asarray(half)
    axes = [np.arange(-h + spacing / 2, h, spacing) for h in half]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    g += rng.uniform(-0.15, 0.15, size=g.shape) * spacing
    # outward normal of the nearest face, so the occupied half faces inwards
    gap = half - np.abs(g)
    ax = np.argmin(gap, axis=1)
    nrm = np.zeros_like(g)
    nrm[np.arange(len(g)), ax] = np.sign(g[np.arange(len(g)), ax] + 1e-12)
    # dipole planes sit on the slab face
    disp = gap[np.arange(len(g)), ax]
    return center + g, nrm, disp


def boxes_scene(seed: int = 0, spacing: float = 0.2, density: float = 25.0) -> Scene:
    """Three axis-aligned coloured slabs filled with dipole cells whose planes
    follow the nearest slab face."""
    rng = np.random.default_rng(seed)
    pos, nrm, dsp, col = [], [], [], []
    for center, half, colour in SLABS:
        p, n, d = _slab_cells(center, half, spacing, rng)
        pos.append(p)
        nrm.append(n)
        dsp.append(d)
        col.append(np.broadcast_to(colour, p.shape))
    pos, nrm, dsp, col = (np.concatenate(a) for a in (pos, nrm, dsp, col))
    rad = np.full(len(pos), 0.9 * spacing)
    scene = _make(pos, rad, nrm, np.full(len(pos), density), col, rng)
    disp = np.broadcast_to(np.minimum(dsp, rad)[:, None], scene.detail_disp.shape).copy()
    return scene.replace(detail_disp=disp)


def shell_scene(seed: int = 0, n: int = 400, radius: float = 1.0, density: float = 30.0) -> Scene:
    """Cells tiling a sphere surface with outward normals; the inside half of
    every cell is occupied."""
    rng = np.random.default_rng(seed)
    dirs = fibonacci_axes(n)
    rot = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    dirs = dirs @ rot.T
    pos = radius * dirs * (1.0 + rng.uniform(-0.01, 0.01, size=(n, 1)))
    spacing = radius * np.sqrt(4.0 * np.pi / n)
    rad = np.full(n, 0.9 * spacing)
    lat = 0.5 + 0.5 * dirs[:, 2:3]
    col = np.concatenate([0.2 + 0.7 * lat, 0.3 + 0.4 * (1 - lat), 0.9 - 0.6 * lat], axis=1)
    return _make(pos, rad, dirs.copy(), np.full(n, density), col, rng, view_var=0.2)


def sparse_scene(seed: int = 0, clusters: int = 6, per_cluster: int = 40, extent: float = 4.0,
                 cluster_radius: float = 0.25, cell_radius: float = 0.05) -> Scene:
    """Tight clusters of small cells separated by large empty gaps."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent, extent, size=(clusters, 3))
    pos = (centers[:, None, :] + cluster_radius * _unit(rng.normal(size=(clusters, per_cluster, 3)))
           * rng.uniform(0.0, 1.0, size=(clusters, per_cluster, 1)) ** (1 / 3)).reshape(-1, 3)
    n = len(pos)
    rad = cell_radius * rng.uniform(0.6, 1.0, size=n)
    nrm = _unit(rng.normal(size=(n, 3)))
    col = rng.uniform(0.1, 1.0, size=(clusters, 3))[np.repeat(np.arange(clusters), per_cluster)]
    return _make(pos, rad, nrm, np.full(n, 20.0), col, rng)


def make_preset(name: str, seed: int = 0) -> Scene:
    if name == "boxes":
        return boxes_scene(seed)
    if name == "shell":
        return shell_scene(seed)
    if name == "sparse":
        return sparse_scene(seed)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
