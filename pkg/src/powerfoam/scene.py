"""Cells with oriented-point (dipole) surfaces, detail sites and directional
radiance, plus the scene container.

The scalar functions in this module (``displacement_at``, ``radiance_at``,
``dipole_clip``) are the readable reference versions; the renderers use
compiled re-implementations in ``powerfoam._kernels`` and are tested against
these.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PowerSite, Ray, RayInterval, EMPTY_INTERVAL, box_diagonal, world_box

NUM_AXES = 8
DEFAULT_DETAILS = 8
DEFAULT_GAMMA = 4.0


class SceneValidationError(ValueError):
    pass


def fibonacci_axes(n: int = NUM_AXES) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@dataclass(frozen=True)
class Dipole:
    normal: np.ndarray
    density: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "density", float(self.density))
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"dipole normal must be unit length, got |n|={np.linalg.norm(n)}")
        if not self.density >= 0.0:
            raise ValueError(f"dipole density must be >= 0, got {self.density}")


@dataclass(frozen=True)
class SVRadiance:
    """Directional radiance: a softmax blend of per-axis RGB values."""

    axes: np.ndarray
    values: np.ndarray
    sharpness: float = DEFAULT_GAMMA

    def __call__(self, view_dir) -> np.ndarray:
        return sv_weights(view_dir, self.axes, self.sharpness) @ np.asarray(self.values)


@dataclass(frozen=True)
class DetailSite:
    uv: np.ndarray
    displacement: float
    radiance: SVRadiance


@dataclass(frozen=True)
class Cell:
    site: PowerSite
    dipole: Dipole
    details: tuple[DetailSite, ...] = ()
    is_steiner: bool = False

    def __post_init__(self):
        object.__setattr__(self, "details", tuple(self.details))
        if self.is_steiner and (self.dipole.density != 0.0 or self.details):
            raise ValueError("Steiner cells carry no density and no detail sites")


# ---------------------------------------------------------------------------
# evaluation


def tangent_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    """Right-handed orthonormal ``(u, v)`` spanning the plane orthogonal to
    ``normal``.

    ``u`` is the coordinate axis of the smallest-magnitude normal component
    projected onto the plane, so the frame is a deterministic function of the
    normal.
    """
    n = np.asarray(normal, dtype=np.float64)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    u = e - (e @ n) * n
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def soft_voronoi_weights(q, sites_uv, temperature: float) -> np.ndarray:
    diff = np.asarray(sites_uv, dtype=np.float64).reshape(-1, 2) - np.asarray(q, dtype=np.float64)
    logits = -temperature * np.sqrt(np.einsum("ij,ij->i", diff, diff))
    w = np.exp(logits - logits.max())
    return w / w.sum()


def sv_weights(view_dir, axes, sharpness: float) -> np.ndarray:
    logits = sharpness * (np.asarray(axes) @ np.asarray(view_dir, dtype=np.float64))
    w = np.exp(logits - logits.max())
    return w / w.sum()


def _chart(cell: Cell, x) -> np.ndarray:
    u, v = tangent_frame(cell.dipole.normal)
    rel = np.asarray(x, dtype=np.float64) - cell.site.position
    return np.array([rel @ u, rel @ v])


def displacement_at(cell: Cell, x_bar, temperature: float) -> float:
    """Soft-Voronoi displacement along the dipole normal at a base-plane point,
    clamped to the cell radius."""
    if not cell.details:
        return 0.0
    q = _chart(cell, x_bar)
    uv = np.array([d.uv for d in cell.details])
    w = soft_voronoi_weights(q, uv, temperature)
    disp = float(w @ np.array([d.displacement for d in cell.details]))
    r = cell.site.radius
    return min(max(disp, -r), r)


def radiance_at(cell: Cell, x, view_dir, temperature: float) -> np.ndarray:
    """Radiance of the cell surface at ``x`` seen along the ray direction
    ``view_dir``. ``x`` is projected along the normal into the tangent chart."""
    if not cell.details:
        return np.zeros(3)
    q = _chart(cell, x)
    w = soft_voronoi_weights(q, np.array([d.uv for d in cell.details]), temperature)
    directional = np.array([d.radiance(view_dir) for d in cell.details])
    return np.maximum(w @ directional, 0.0)


class DipoleClip(NamedTuple):
    length: float
    surface_point: np.ndarray | None


class OccupiedSpan(NamedTuple):
    interval: RayInterval
    t_surface: float | None
    displacement: float


def occupied_span(cell: Cell, ray: Ray, interval: RayInterval, temperature: float) -> OccupiedSpan:
    """Sub-interval of ``interval`` behind the displaced dipole plane."""
    o, d = ray
    p, n = cell.site.position, cell.dipole.normal
    if interval.empty:
        return OccupiedSpan(EMPTY_INTERVAL, None, 0.0)
    dn = float(d @ n)
    pn = float((p - o) @ n)
    if abs(dn) <= 1e-12:
        x_in = o + interval.t_in * d
        disp = displacement_at(cell, x_in - ((x_in - p) @ n) * n, temperature)
        inside = (x_in - p) @ n <= disp
        return OccupiedSpan(interval if inside else EMPTY_INTERVAL, None, disp)
    x_bar = o + (pn / dn) * d
    disp = displacement_at(cell, x_bar, temperature)
    t_s = (pn + disp) / dn
    lo, hi = interval
    if dn < 0.0:
        lo = max(lo, t_s)
    else:
        hi = min(hi, t_s)
    span = RayInterval(lo, hi) if hi > lo else EMPTY_INTERVAL
    return OccupiedSpan(span, t_s, disp)


def dipole_clip(cell: Cell, ray: Ray, interval: RayInterval, temperature: float) -> DipoleClip:
    span, t_s, _ = occupied_span(cell, ray, interval, temperature)
    point = None if t_s is None else ray.origin + t_s * ray.direction
    return DipoleClip(max(span.length, 0.0) if not span.empty else 0.0, point)


def shading_point(ray: Ray, span: OccupiedSpan) -> np.ndarray:
    """Where colour is evaluated: the displaced-surface hit, or the entry of
    the occupied span when the ray runs parallel to the dipole plane."""
    t = span.t_surface if span.t_surface is not None else span.interval.t_in
    return ray.origin + t * ray.direction


# ---------------------------------------------------------------------------
# scene container


def default_temperature(radii) -> float:
    radii = np.asarray(radii, dtype=np.float64)
    live = radii[radii > 0]
    return 8.0 / float(np.median(live)) if len(live) else 8.0


def ring_uv(k: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / max(k, 1)
    return 0.5 * radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass(frozen=True, eq=False)
class Scene:
    """Structure-of-arrays scene; ``N`` cells with ``K`` detail sites each.

    Steiner cells carry zero density; their detail arrays are zero padding.
    """

    positions: np.ndarray        # (N, 3)
    radii: np.ndarray            # (N,)
    normals: np.ndarray          # (N, 3)
    densities: np.ndarray        # (N,)
    is_steiner: np.ndarray       # (N,) bool
    detail_uv: np.ndarray        # (N, K, 2)
    detail_disp: np.ndarray      # (N, K)
    detail_values: np.ndarray    # (N, K, 8, 3)
    temperature: float
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axes: np.ndarray = field(default_factory=fibonacci_axes)
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        n = len(np.asarray(self.radii).reshape(-1))
        object.__setattr__(self, "positions", f64(self.positions).reshape(n, 3))
        object.__setattr__(self, "radii", f64(self.radii).reshape(n))
        object.__setattr__(self, "normals", f64(self.normals).reshape(n, 3))
        object.__setattr__(self, "densities", f64(self.densities).reshape(n))
        object.__setattr__(self, "is_steiner", np.ascontiguousarray(self.is_steiner, dtype=bool).reshape(n))
        uv = f64(self.detail_uv)
        k = uv.shape[1] if uv.ndim == 3 else 0
        object.__setattr__(self, "detail_uv", uv.reshape(n, k, 2))
        object.__setattr__(self, "detail_disp", f64(self.detail_disp).reshape(n, k))
        object.__setattr__(self, "detail_values", f64(self.detail_values).reshape(n, k, NUM_AXES, 3))
        object.__setattr__(self, "background", f64(self.background).reshape(3))
        object.__setattr__(self, "axes", f64(self.axes).reshape(NUM_AXES, 3))
        object.__setattr__(self, "temperature", float(self.temperature))
        object.__setattr__(self, "gamma", float(self.gamma))

    # -- construction -----------------------------------------------------

    @classmethod
    def from_cells(cls, cells: Sequence[Cell], temperature: float | None = None,
                   background=(0.0, 0.0, 0.0), axes=None, gamma: float = DEFAULT_GAMMA) -> "Scene":
        cells = list(cells)
        k = max((len(c.details) for c in cells), default=0)
        n = len(cells)
        uv = np.zeros((n, k, 2))
        disp = np.zeros((n, k))
        vals = np.zeros((n, k, NUM_AXES, 3))
        for i, c in enumerate(cells):
            if c.details and len(c.details) != k:
                raise SceneValidationError("all non-Steiner cells need the same number of detail sites")
            for j, dsite in enumerate(c.details):
                uv[i, j] = dsite.uv
                disp[i, j] = dsite.displacement
                vals[i, j] = dsite.radiance.values
        radii = np.array([c.site.radius for c in cells])
        if axes is None:
            axes = cells[0].details[0].radiance.axes if any(c.details for c in cells) else fibonacci_axes()
        return cls(
            positions=np.array([c.site.position for c in cells]).reshape(n, 3),
            radii=radii,
            normals=np.array([c.dipole.normal for c in cells]).reshape(n, 3),
            densities=np.array([c.dipole.density for c in cells]),
            is_steiner=np.array([c.is_steiner for c in cells], dtype=bool),
            detail_uv=uv, detail_disp=disp, detail_values=vals,
            temperature=default_temperature(radii) if temperature is None else temperature,
            background=background, axes=axes, gamma=gamma,
        )

    def replace(self, **changes) -> "Scene":
        return dataclasses.replace(self, **changes)

    # -- views ------------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.radii)

    @property
    def k(self) -> int:
        return self.detail_uv.shape[1]

    @cached_property
    def world_box(self) -> np.ndarray:
        return world_box(self.positions, self.radii)

    @property
    def diagonal(self) -> float:
        return box_diagonal(self.world_box)

    @cached_property
    def frames(self) -> tuple[np.ndarray, np.ndarray]:
        u = np.zeros((self.n_cells, 3))
        v = np.zeros((self.n_cells, 3))
        for i, n in enumerate(self.normals):
            u[i], v[i] = tangent_frame(n)
        return u, v

    def sites(self) -> list[PowerSite]:
        return [PowerSite(p, r) for p, r in zip(self.positions, self.radii)]

    @property
    def pr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(positions, radii)``, accepted by every geometry function."""
        return self.positions, self.radii

    def cell(self, i: int) -> Cell:
        steiner = bool(self.is_steiner[i])
        details = () if steiner else tuple(
            DetailSite(self.detail_uv[i, j].copy(), float(self.detail_disp[i, j]),
                       SVRadiance(self.axes, self.detail_values[i, j].copy(), self.gamma))
            for j in range(self.k)
        )
        return Cell(PowerSite(self.positions[i], self.radii[i]),
                    Dipole(self.normals[i], self.densities[i]), details, steiner)

    def select(self, keep) -> "Scene":
        """Sub-scene with the cells selected by a boolean mask or index array."""
        keep = np.asarray(keep)
        return self.replace(
            positions=self.positions[keep], radii=self.radii[keep], normals=self.normals[keep],
            densities=self.densities[keep], is_steiner=self.is_steiner[keep],
            detail_uv=self.detail_uv[keep], detail_disp=self.detail_disp[keep],
            detail_values=self.detail_values[keep],
        )

    def concat(self, other: "Scene") -> "Scene":
        if other.k != self.k:
            raise SceneValidationError("cannot concatenate scenes with different detail counts")
        cat = lambda a, b: np.concatenate([a, b])
        return self.replace(
            positions=cat(self.positions, other.positions), radii=cat(self.radii, other.radii),
            normals=cat(self.normals, other.normals), densities=cat(self.densities, other.densities),
            is_steiner=cat(self.is_steiner, other.is_steiner), detail_uv=cat(self.detail_uv, other.detail_uv),
            detail_disp=cat(self.detail_disp, other.detail_disp),
            detail_values=cat(self.detail_values, other.detail_values),
        )

    def steiner_cells(self, positions, radii) -> "Scene":
        """Zero-density cells at ``positions`` shaped like this scene."""
        m = len(radii)
        normals = np.zeros((m, 3))
        normals[:, 2] = 1.0
        return self.replace(
            positions=np.asarray(positions).reshape(m, 3), radii=radii, normals=normals,
            densities=np.zeros(m), is_steiner=np.ones(m, dtype=bool),
            detail_uv=np.zeros((m, self.k, 2)), detail_disp=np.zeros((m, self.k)),
            detail_values=np.zeros((m, self.k, NUM_AXES, 3)),
        )

    def kernel_args(self) -> tuple:
        """Arrays in the order the compiled kernels expect."""
        u, v = self.frames
        return (self.positions, self.radii, self.normals, self.densities, u, v,
                self.detail_uv, self.detail_disp, self.detail_values, self.axes,
                self.gamma, self.temperature)


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: Scene) -> None:
    """Raise ``SceneValidationError`` naming the first violated invariant."""
    arrays = {
        "positions": scene.positions, "radii": scene.radii, "normals": scene.normals,
        "densities": scene.densities, "detail uv": scene.detail_uv,
        "displacements": scene.detail_disp, "radiance values": scene.detail_values,
        "axes": scene.axes, "background": scene.background,
    }
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise SceneValidationError(f"non-finite {name}")
    if not (np.isfinite(scene.temperature) and scene.temperature > 0):
        raise SceneValidationError(f"temperature must be > 0, got {scene.temperature}")
    if not (np.isfinite(scene.gamma) and scene.gamma > 0):
        raise SceneValidationError(f"sv sharpness must be > 0, got {scene.gamma}")
    bad = np.flatnonzero(scene.radii < 0)
    if len(bad):
        raise SceneValidationError(f"cell {bad[0]}: negative radius {scene.radii[bad[0]]}")
    norms = np.linalg.norm(scene.normals, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-9)
    if len(bad):
        raise SceneValidationError(f"cell {bad[0]}: normal is not unit length")
    bad = np.flatnonzero(scene.densities < 0)
    if len(bad):
        raise SceneValidationError(f"cell {bad[0]}: negative density")
    bad = np.flatnonzero(scene.is_steiner & (scene.densities != 0))
    if len(bad):
        raise SceneValidationError(f"cell {bad[0]}: Steiner cell with nonzero density")
    if np.any(np.abs(np.linalg.norm(scene.axes, axis=1) - 1.0) > 1e-9):
        raise SceneValidationError("sv axes must be unit length")
    if len(np.unique(np.round(scene.axes, 12), axis=0)) != NUM_AXES:
        raise SceneValidationError("sv axes must be pairwise distinct")
    if np.any(scene.detail_values < 0):
        raise SceneValidationError("negative radiance value")
    live = ~scene.is_steiner
    tol = 1e-9 * np.maximum(scene.radii, 1.0)
    if scene.k:
        over = np.abs(scene.detail_disp[live]).max(axis=1) > scene.radii[live] + tol[live]
        if np.any(over):
            raise SceneValidationError(f"cell {np.flatnonzero(live)[np.argmax(over)]}: displacement exceeds radius")
        over = np.linalg.norm(scene.detail_uv[live], axis=2).max(axis=1) > scene.radii[live] + tol[live]
        if np.any(over):
            raise SceneValidationError(f"cell {np.flatnonzero(live)[np.argmax(over)]}: detail site outside radius")
    if scene.n_cells > 1:
        min_sep = 1e-7 * scene.diagonal
        pairs = cKDTree(scene.positions).query_pairs(min_sep, output_type="ndarray")
        if len(pairs):
            raise SceneValidationError(f"cells {pairs[0][0]} and {pairs[0][1]} are closer than {min_sep:.3g}")


def separate_coincident(scene: Scene, seed: int = 0) -> Scene:
    """Jitter sites so that no two are closer than ``1e-7`` of the box diagonal."""
    if scene.n_cells < 2:
        return scene
    min_sep = 1e-7 * scene.diagonal
    rng = np.random.default_rng(seed)
    pos = scene.positions.copy()
    for _ in range(100):
        pairs = cKDTree(pos).query_pairs(min_sep, output_type="ndarray")
        if len(pairs) == 0:
            break
        for j in np.unique(pairs[:, 1]):
            step = rng.normal(size=3)
            pos[j] += 2.0 * min_sep * step / np.linalg.norm(step)
    return scene.replace(positions=pos)
