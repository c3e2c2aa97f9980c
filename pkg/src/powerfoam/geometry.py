"""Power-diagram geometry: power distance, radical planes, adjacency graphs
and ray/cell interval computation.

Everything here works on plain numpy arrays of site positions and radii; the
``PowerSite`` dataclass is a convenience for the scalar API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree


class DegenerateSitesError(ValueError):
    """Two sites share a position, so their radical plane is undefined."""


@dataclass(frozen=True)
class PowerSite:
    position: np.ndarray
    radius: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "radius", float(self.radius))
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"site position must be finite, got {pos}")
        if not (self.radius >= 0.0):
            raise ValueError(f"site radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class RadicalPlane:
    """The plane ``{x : 2 x . normal = offset}`` of equal power."""

    normal: np.ndarray
    offset: float

    def signed(self, x) -> np.ndarray:
        """``2 x . normal - offset``; negative on the side of the first site."""
        return 2.0 * np.asarray(x, dtype=np.float64) @ self.normal - self.offset

    def distance(self, x) -> np.ndarray:
        """Unsigned Euclidean distance from ``x`` to the plane."""
        return np.abs(self.signed(x)) / (2.0 * np.linalg.norm(self.normal))


class RayInterval(NamedTuple):
    t_in: float
    t_out: float

    @property
    def length(self) -> float:
        return self.t_out - self.t_in

    @property
    def empty(self) -> bool:
        return not (self.t_out > self.t_in)


EMPTY_INTERVAL = RayInterval(0.0, 0.0)


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def make_ray(origin, direction) -> Ray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    return Ray(np.asarray(origin, dtype=np.float64).reshape(3), d / np.linalg.norm(d))


def _positions_radii(sites):
    """Accept a list of PowerSite or a ``(positions, radii)`` pair."""
    if isinstance(sites, tuple) and len(sites) == 2 and not isinstance(sites[0], PowerSite):
        pos, rad = sites
        return np.asarray(pos, dtype=np.float64).reshape(-1, 3), np.asarray(rad, dtype=np.float64).reshape(-1)
    sites = list(sites)
    if not sites:
        return np.zeros((0, 3)), np.zeros(0)
    pos = np.array([s.position for s in sites], dtype=np.float64)
    rad = np.array([s.radius for s in sites], dtype=np.float64)
    return pos, rad


# ---------------------------------------------------------------------------
# scalar operations


def power_distance(x, s: PowerSite) -> float:
    d = np.asarray(x, dtype=np.float64) - s.position
    return float(d @ d - s.radius * s.radius)


def radical_plane(a: PowerSite, b: PowerSite) -> RadicalPlane:
    normal = b.position - a.position
    if not np.any(normal):
        raise DegenerateSitesError(f"coincident sites at {a.position}")
    offset = b.position @ b.position - a.position @ a.position + a.radius**2 - b.radius**2
    return RadicalPlane(normal, float(offset))


def locate_cell(x, sites) -> int:
    """Index of the site with minimal power at ``x`` (lowest index on ties)."""
    pos, rad = _positions_radii(sites)
    if len(rad) == 0:
        raise ValueError("locate_cell needs at least one site")
    d = pos - np.asarray(x, dtype=np.float64)
    return int(np.argmin(np.einsum("ij,ij->i", d, d) - rad * rad))


def sphere_interval(origin, direction, center, radius) -> RayInterval:
    oc = np.asarray(origin, dtype=np.float64) - center
    b = float(oc @ direction)
    disc = b * b - (float(oc @ oc) - radius * radius)
    if disc <= 0.0:
        return EMPTY_INTERVAL
    h = np.sqrt(disc)
    return RayInterval(-b - h, -b + h)


def cell_interval(ray: Ray, cell_index: int, sites, neighbors: Iterable[int],
                  t_min: float = 0.0, t_max: float = np.inf) -> RayInterval:
    """Parameter range where ``cell_index`` is the power-minimal site and the
    point lies inside its bounding sphere.

    ``neighbors`` must contain every power-diagram neighbour of the cell; any
    superset (e.g. the Cech neighbours) gives the same answer.
    """
    pos, rad = _positions_radii(sites)
    o, d = ray
    p_i, r_i = pos[cell_index], rad[cell_index]
    lo, hi = sphere_interval(o, d, p_i, r_i)
    lo, hi = max(lo, t_min), min(hi, t_max)
    if not hi > lo:
        return EMPTY_INTERVAL
    op = o - p_i
    for j in neighbors:
        j = int(j)
        if j == cell_index:
            continue
        delta = pos[j] - p_i
        k_half = 0.5 * (delta @ delta + r_i * r_i - rad[j] * rad[j])
        num = k_half - op @ delta
        den = d @ delta
        if den > 0.0:
            hi = min(hi, num / den)
        elif den < 0.0:
            lo = max(lo, num / den)
        elif num < 0.0:
            return EMPTY_INTERVAL
        if not hi > lo:
            return EMPTY_INTERVAL
    return RayInterval(float(lo), float(hi))


# ---------------------------------------------------------------------------
# world box


def world_box(positions, radii, scale: float = 3.0) -> np.ndarray:
    """Axis-aligned box of all spheres, grown ``scale`` times about its centre.

    Returned as a ``(2, 3)`` array ``[lo, hi]``.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    if len(radii) == 0:
        return np.array([[-1.0] * 3, [1.0] * 3])
    lo = (positions - radii[:, None]).min(axis=0)
    hi = (positions + radii[:, None]).max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    half = np.maximum(half, max(half.max(), 1e-3) * 1e-3)
    return np.stack([center - scale * half, center + scale * half])


def box_diagonal(box) -> float:
    box = np.asarray(box, dtype=np.float64)
    return float(np.linalg.norm(box[1] - box[0]))


# ---------------------------------------------------------------------------
# adjacency graphs


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected graph over ``n`` cells stored as sorted unique edges plus CSR
    neighbour lists."""

    n: int
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    # sites known to own an empty power cell; None when the graph cannot tell
    hidden: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_pairs(cls, n: int, pairs, hidden=None) -> "AdjacencyGraph":
        pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs):
            if np.any(pairs[:, 0] == pairs[:, 1]):
                raise ValueError("self-loops are not allowed")
            pairs = np.sort(pairs, axis=1)
            pairs = np.unique(pairs, axis=0)
        both = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else pairs
        order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.zeros(0, dtype=np.int64)
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=n) if len(both) else np.zeros(n, dtype=np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = both[:, 1].astype(np.int64) if len(both) else np.zeros(0, dtype=np.int64)
        if hidden is not None:
            hidden = np.asarray(hidden, dtype=bool).reshape(n)
        return cls(n, pairs, indptr, indices, hidden)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors(i)
        k = np.searchsorted(nb, j)
        return bool(k < len(nb) and nb[k] == j)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def issubset(self, other: "AdjacencyGraph") -> bool:
        return self.edge_set() <= other.edge_set()

    def __len__(self) -> int:
        return len(self.edges)

    def __eq__(self, other) -> bool:
        return isinstance(other, AdjacencyGraph) and self.n == other.n and np.array_equal(self.edges, other.edges)

    def subgraph_mask(self, keep: np.ndarray) -> "AdjacencyGraph":
        return AdjacencyGraph.from_pairs(self.n, self.edges[np.asarray(keep, dtype=bool)], self.hidden)


def cech_complex(sites) -> AdjacencyGraph:
    """Edges between every pair of strictly overlapping spheres."""
    pos, rad = _positions_radii(sites)
    n = len(rad)
    if n < 2:
        return AdjacencyGraph.from_pairs(n, np.zeros((0, 2), dtype=np.int64))
    tree = cKDTree(pos)
    # broad phase: any partner j must satisfy |p_i - p_j| < r_i + r_max
    cand = tree.query_ball_point(pos, r=rad + rad.max(), return_sorted=True)
    ii = np.repeat(np.arange(n), [len(c) for c in cand])
    jj = np.fromiter((j for c in cand for j in c), dtype=np.int64, count=len(ii))
    keep = jj > ii
    ii, jj = ii[keep], jj[keep]
    delta = pos[jj] - pos[ii]
    dist = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    overlap = dist < rad[ii] + rad[jj]
    return AdjacencyGraph.from_pairs(n, np.stack([ii[overlap], jj[overlap]], axis=1))


# ---------------------------------------------------------------------------
# convex polytope clipping (power cells)


@dataclass
class Polytope:
    """Convex polytope as labelled planar faces, in coordinates centred on the
    generating site. Labels ``>= 0`` name the neighbouring site, negative labels
    are world-box walls."""

    origin: np.ndarray
    faces: list[tuple[int, np.ndarray]]

    @property
    def empty(self) -> bool:
        return not self.faces

    def vertices(self) -> np.ndarray:
        if not self.faces:
            return np.zeros((0, 3))
        return np.concatenate([f for _, f in self.faces])

    def face(self, label: int) -> np.ndarray | None:
        for lab, poly in self.faces:
            if lab == label:
                return poly
        return None


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    return 0.5 * float(np.linalg.norm(np.cross(poly, np.roll(poly, -1, axis=0)).sum(axis=0)))


def _box_polytope(box, origin) -> Polytope:
    lo, hi = box[0] - origin, box[1] - origin
    c = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    # corners indexed by bits (x, y, z); each face listed counter-clockwise seen from outside
    quads = {
        -1: (0, 1, 3, 2), -2: (4, 6, 7, 5),  # x = lo, x = hi
        -3: (0, 4, 5, 1), -4: (2, 3, 7, 6),  # y = lo, y = hi
        -5: (0, 2, 6, 4), -6: (1, 5, 7, 3),  # z = lo, z = hi
    }
    return Polytope(np.asarray(origin, dtype=np.float64), [(lab, c[list(q)]) for lab, q in quads.items()])


def _order_cap(points: np.ndarray, normal: np.ndarray, tol: float) -> np.ndarray:
    if len(points) == 0:
        return points
    # drop near-duplicates
    uniq: list[np.ndarray] = []
    for p in points:
        if all(np.abs(p - q).max() > tol for q in uniq):
            uniq.append(p)
    pts = np.array(uniq)
    if len(pts) < 3:
        return pts
    a = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    c = pts.mean(axis=0)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    return pts[np.argsort(ang, kind="stable")]


def clip_polytope(poly: Polytope, normal: np.ndarray, offset: float, label: int, tol: float) -> Polytope:
    """Keep the part of ``poly`` with ``x . normal <= offset`` (``normal`` unit)."""
    new_faces: list[tuple[int, np.ndarray]] = []
    cap: list[np.ndarray] = []
    for lab, f in poly.faces:
        s = f @ normal - offset
        if np.all(s <= tol):
            new_faces.append((lab, f))
            cap.extend(f[np.abs(s) <= tol])
            continue
        if np.all(s >= -tol):
            cap.extend(f[np.abs(s) <= tol])
            continue
        out = []
        m = len(f)
        for k in range(m):
            a, b = f[k], f[(k + 1) % m]
            sa, sb = s[k], s[(k + 1) % m]
            if sa <= tol:
                out.append(a)
                if abs(sa) <= tol:
                    cap.append(a)
            if (sa < -tol and sb > tol) or (sa > tol and sb < -tol):
                x = a + (sa / (sa - sb)) * (b - a)
                out.append(x)
                cap.append(x)
        if len(out) >= 3:
            new_faces.append((lab, np.array(out)))
    capf = _order_cap(np.array(cap) if cap else np.zeros((0, 3)), normal, tol * 10)
    if len(capf) >= 3:
        new_faces.append((label, capf))
    return Polytope(poly.origin, new_faces)


def power_cell(i: int, pos: np.ndarray, rad: np.ndarray, box, candidates=None) -> Polytope:
    """The power cell of site ``i`` clipped to ``box``, by successive half-space
    clipping against the radical planes of ``candidates`` (default: all)."""
    box = np.asarray(box, dtype=np.float64)
    diag = box_diagonal(box)
    tol = 1e-12 * diag
    p_i = pos[i]
    poly = _box_polytope(box, p_i)
    if candidates is None:
        cand = np.delete(np.arange(len(rad)), i)
    else:
        cand = np.asarray([j for j in candidates if j != i], dtype=np.int64)
    if len(cand) == 0:
        return poly
    delta = pos[cand] - p_i
    dn = np.linalg.norm(delta, axis=1)
    if np.any(dn == 0.0):
        raise DegenerateSitesError(f"site {i} coincides with site {cand[dn == 0][0]}")
    normals = delta / dn[:, None]
    offsets = 0.5 * (dn * dn + rad[i] ** 2 - rad[cand] ** 2) / dn
    order = np.argsort(offsets, kind="stable")
    normals, offsets, cand = normals[order], offsets[order], cand[order]
    alive = np.ones(len(cand), dtype=bool)
    while True:
        verts = poly.vertices()
        if len(verts) == 0:
            break
        smax = (verts @ normals[alive].T - offsets[alive]).max(axis=0)
        idx = np.flatnonzero(alive)
        cutting = idx[smax > tol]
        alive[idx[smax <= tol]] = False
        if len(cutting) == 0:
            break
        k = cutting[0]
        alive[k] = False
        poly = clip_polytope(poly, normals[k], offsets[k], int(cand[k]), tol)
    return poly


def power_cells(sites, box=None, candidates: AdjacencyGraph | None = None) -> list[Polytope]:
    pos, rad = _positions_radii(sites)
    box = world_box(pos, rad) if box is None else np.asarray(box, dtype=np.float64)
    return [
        power_cell(i, pos, rad, box, None if candidates is None else candidates.neighbors(i))
        for i in range(len(rad))
    ]


def _face_area_eps(box) -> float:
    return 1e-10 * box_diagonal(box) ** 2


def power_dual(sites, world_box_: np.ndarray | None = None) -> AdjacencyGraph:
    """Dual graph of the power diagram restricted to the world box.

    An edge is present when the two clipped cells share a face of area above
    ``1e-10 * diag^2`` (seen from either side). Sites whose clipped cell has
    no face that large are flagged in ``hidden``.
    """
    pos, rad = _positions_radii(sites)
    n = len(rad)
    if n == 0:
        return AdjacencyGraph.from_pairs(0, np.zeros((0, 2), dtype=np.int64))
    box = world_box(pos, rad) if world_box_ is None else np.asarray(world_box_, dtype=np.float64)
    eps = _face_area_eps(box)
    pairs = []
    hidden = np.ones(n, dtype=bool)
    for i, cell in enumerate(power_cells((pos, rad), box)):
        for lab, f in cell.faces:
            if polygon_area(f) > eps:
                hidden[i] = False
                if lab >= 0:
                    pairs.append((i, lab))
    return AdjacencyGraph.from_pairs(n, pairs, hidden)


def _point_polygon_distance_2d(c: np.ndarray, poly: np.ndarray) -> float:
    """Distance from 2-D point ``c`` to the convex polygon ``poly`` (0 inside)."""
    m = len(poly)
    nxt = np.roll(poly, -1, axis=0)
    area2 = float(np.sum(poly[:, 0] * nxt[:, 1] - poly[:, 1] * nxt[:, 0]))
    sign = 1.0 if area2 >= 0 else -1.0
    inside = True
    best = np.inf
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        e = b - a
        if sign * (e[0] * (c[1] - a[1]) - e[1] * (c[0] - a[0])) < 0:
            inside = False
        ee = e @ e
        t = 0.0 if ee == 0 else min(1.0, max(0.0, ((c - a) @ e) / ee))
        best = min(best, float(np.linalg.norm(a + t * e - c)))
    return 0.0 if inside else best


def face_meets_ball(face: np.ndarray, radius: float, normal: np.ndarray, offset: float) -> bool:
    """Whether a planar face (site-local coordinates, on ``x . normal = offset``)
    meets the closed ball of ``radius`` about the origin."""
    rho2 = radius * radius - offset * offset
    if rho2 < 0.0 or len(face) < 3:
        return False
    a = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    poly2 = np.stack([face @ u, face @ v], axis=1)
    center = normal * offset
    return _point_polygon_distance_2d(np.array([center @ u, center @ v]), poly2) <= np.sqrt(rho2)


def alpha_complex(sites, dual: AdjacencyGraph, world_box_: np.ndarray | None = None) -> AdjacencyGraph:
    """Dual edges whose shared power face meets the bounding balls."""
    pos, rad = _positions_radii(sites)
    n = len(rad)
    if len(dual) == 0:
        return AdjacencyGraph.from_pairs(n, np.zeros((0, 2), dtype=np.int64), dual.hidden)
    box = world_box(pos, rad) if world_box_ is None else np.asarray(world_box_, dtype=np.float64)
    # tangent pairs touch in a single point; dropped to match the Cech tie-break
    ei, ej = dual.edges[:, 0], dual.edges[:, 1]
    delta = pos[ej] - pos[ei]
    overlap = np.sqrt(np.einsum("ij,ij->i", delta, delta)) < rad[ei] + rad[ej]
    # meets[i][j]: the face of cell i towards j meets ball i
    meets: list[dict[int, bool]] = [{} for _ in range(n)]
    # the ball sits strictly inside the world box, so wall faces never count
    nonempty = np.zeros(n, dtype=bool)
    for i in range(n):
        nbrs = dual.neighbors(i)
        if len(nbrs) == 0:
            continue
        cell = power_cell(i, pos, rad, box, nbrs)
        delta = pos[nbrs] - pos[i]
        dn = np.linalg.norm(delta, axis=1)
        offsets = 0.5 * (dn * dn + rad[i] ** 2 - rad[nbrs] ** 2) / dn
        # the site itself lies in its cell: the bounded cell holds its centre
        nonempty[i] = bool(np.all(offsets >= 0.0))
        for j, dj, nj, off in zip(nbrs, delta, dn, offsets):
            face = cell.face(int(j))
            m = face is not None and face_meets_ball(face, rad[i], dj / nj, off)
            meets[i][int(j)] = m
            nonempty[i] |= m
    keep = np.zeros(len(dual), dtype=bool)
    for e, (i, j) in enumerate(dual.edges):
        i, j = int(i), int(j)
        if not overlap[e]:
            continue
        # both copies of the shared face are tested, they agree up to
        # rounding; a cell whose region misses its own ball (the smaller of
        # two nested balls, say) keeps every overlapping edge so it stays empty
        keep[e] = (meets[i].get(j, False) or meets[j].get(i, False)
                   or not nonempty[i] or not nonempty[j])
    return dual.subgraph_mask(keep)
