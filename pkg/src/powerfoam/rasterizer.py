"""Tile-based rasterization of bounded power cells in power-distance order."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .geometry import AdjacencyGraph, PowerSite, power_distance
from .render_core import Camera, Image
from .scene import Scene


def sort_key(camera_origin, s: PowerSite) -> float:
    """Painter's-order key: power of the camera centre w.r.t. the site."""
    return power_distance(camera_origin, s)


def sort_keys(camera_origin, positions, radii) -> np.ndarray:
    d = np.asarray(positions) - np.asarray(camera_origin, dtype=np.float64)
    return np.einsum("ij,ij->i", d, d) - np.asarray(radii) ** 2


def painter_order(camera_origin, positions, radii, cells=None) -> np.ndarray:
    """Cell indices sorted by ascending key, ties by index."""
    cells = np.arange(len(radii)) if cells is None else np.asarray(cells, dtype=np.int64)
    keys = sort_keys(camera_origin, positions[cells], radii[cells])
    return cells[np.lexsort((cells, keys))]


def drawn_cells(scene: Scene, graph: AdjacencyGraph | None = None) -> np.ndarray:
    """Cells that can contribute colour: positive density and, when ``graph``
    knows it, a non-empty power cell."""
    keep = scene.densities > 0
    if graph is not None and graph.hidden is not None:
        keep &= ~graph.hidden
    return np.flatnonzero(keep)


@dataclass(frozen=True, eq=False)
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    indptr: np.ndarray   # (tiles + 1,)
    indices: np.ndarray  # cell ids, each tile's run sorted by key

    def cells(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.indices[self.indptr[t]:self.indptr[t + 1]]

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def pixel_tiles(self, width: int, height: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width]
        return ((ys // self.tile_size) * self.tiles_x + xs // self.tile_size).reshape(-1).astype(np.int64)


def sphere_pixel_bounds(cam: Camera, center, radius) -> tuple[float, float, float, float] | None:
    """Conservative pixel box ``(x0, x1, y0, y1)`` of a sphere under a pinhole
    camera, or ``None`` when it is not in front of the camera. Infinite
    bounds mean the sphere reaches the camera plane on that side."""
    c = cam.rotation.T @ (np.asarray(center, dtype=np.float64) - cam.origin)
    if c[2] + radius <= 0.0:
        return None
    out = []
    for lat, f, pc in ((c[0], cam.fx, cam.cx), (c[1], cam.fy, cam.cy)):
        dist = np.hypot(lat, c[2])
        if radius >= dist:
            out.append((-np.inf, np.inf))
            continue
        mid = np.arctan2(lat, c[2])
        half = np.arcsin(radius / dist)
        lo, hi = mid - half, mid + half
        if hi <= -np.pi / 2 or lo >= np.pi / 2:
            return None
        a = -np.inf if lo <= -np.pi / 2 else f * np.tan(lo) + pc
        b = np.inf if hi >= np.pi / 2 else f * np.tan(hi) + pc
        out.append((a, b))
    return out[0][0], out[0][1], out[1][0], out[1][1]


def _sphere_pixel_boxes(cam: Camera, centers, radii):
    """Vectorized ``sphere_pixel_bounds`` for spheres not containing the
    camera; returns ``(x0, x1, y0, y1, visible)``."""
    c = (np.asarray(centers) - cam.origin) @ cam.rotation
    visible = c[:, 2] + radii > 0.0
    out = []
    for lat, f, pc in ((c[:, 0], cam.fx, cam.cx), (c[:, 1], cam.fy, cam.cy)):
        dist = np.hypot(lat, c[:, 2])
        full = radii >= dist
        mid = np.arctan2(lat, c[:, 2])
        half = np.arcsin(np.minimum(1.0, radii / np.maximum(dist, 1e-300)))
        lo, hi = mid - half, mid + half
        visible &= full | ((hi > -np.pi / 2) & (lo < np.pi / 2))
        with np.errstate(invalid="ignore", over="ignore"):
            a = np.where(full | (lo <= -np.pi / 2), -np.inf, f * np.tan(lo) + pc)
            b = np.where(full | (hi >= np.pi / 2), np.inf, f * np.tan(hi) + pc)
        out += [a, b]
    return out[0], out[1], out[2], out[3], visible


def _tile_cones(cam: Camera, tile_size: int, tx: int, ty: int):
    """Centre direction and half-angle of a cone holding every ray of each tile."""
    x0 = np.arange(tx) * tile_size
    y0 = np.arange(ty) * tile_size
    x1 = np.minimum(x0 + tile_size, cam.width)
    y1 = np.minimum(y0 + tile_size, cam.height)
    gx, gy = np.meshgrid((x0 + x1) / 2, (y0 + y1) / 2)
    hx, hy = np.meshgrid((x1 - x0) / 2, (y1 - y0) / 2)
    centers = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    dirs = cam.camera_directions(centers) @ cam.rotation.T
    # both camera models map pixels to directions with Lipschitz constant 1/f
    half = (np.hypot(hx, hy).reshape(-1) + 1.0) / cam.focal_min
    return dirs, half


def cull_to_tiles(cam: Camera, sites, tile_size: int = 16, cells=None) -> TileGrid:
    """Bin spheres into screen tiles; every tile list is in painter's order.

    ``sites`` is a ``(positions, radii)`` pair or a list of ``PowerSite``;
    ``cells`` optionally restricts which indices are binned.
    """
    if isinstance(sites, tuple):
        pos, rad = np.asarray(sites[0], dtype=np.float64), np.asarray(sites[1], dtype=np.float64)
    else:
        pos = np.array([s.position for s in sites]).reshape(-1, 3)
        rad = np.array([s.radius for s in sites])
    tx = -(-cam.width // tile_size)
    ty = -(-cam.height // tile_size)
    n_tiles = tx * ty
    q = cam.origin
    order = painter_order(q, pos, rad, cells)
    rel = pos[order] - q
    dist = np.linalg.norm(rel, axis=1)
    r = rad[order]
    # spheres that only exist before the near clip or after the far clip
    live = (dist + r >= cam.near) & (dist - r <= cam.far)
    inside = dist <= r
    mask = np.zeros((n_tiles, len(order)), dtype=bool)
    mask[:, inside & live] = True
    rest = np.flatnonzero(live & ~inside)
    if cam.model == "pinhole" and len(rest):
        x0, x1, y0, y1, ok = _sphere_pixel_boxes(cam, pos[order[rest]], r[rest])
        with np.errstate(invalid="ignore"):
            c0 = np.floor((x0 - 1.0) / tile_size)
            c1 = np.floor((x1 + 1.0) / tile_size)
            r0 = np.floor((y0 - 1.0) / tile_size)
            r1 = np.floor((y1 + 1.0) / tile_size)
        cols = np.arange(tx)[:, None]
        rows = np.arange(ty)[:, None]
        colmask = ok[None, :] & (cols >= c0[None, :]) & (cols <= c1[None, :])
        rowmask = (rows >= r0[None, :]) & (rows <= r1[None, :])
        mask[:, rest] = (rowmask[:, None, :] & colmask[None, :, :]).reshape(n_tiles, len(rest))
    elif len(rest):
        tdir, thalf = _tile_cones(cam, tile_size, tx, ty)
        sdir = rel[rest] / dist[rest, None]
        alpha = np.arcsin(np.minimum(1.0, r[rest] / dist[rest]))
        ang = np.arccos(np.clip(tdir @ sdir.T, -1.0, 1.0))
        mask[:, rest] = ang <= thalf[:, None] + alpha[None, :]
    counts = mask.sum(axis=1)
    indptr = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    rows, cols = np.nonzero(mask)  # row-major: per tile, columns ascending = painter order
    return TileGrid(tile_size, tx, ty, indptr, order[cols].astype(np.int64))


class RasterOutput(NamedTuple):
    rgb: np.ndarray          # (P, 3)
    transmittance: np.ndarray  # (P,)
    counts: np.ndarray       # segments per ray
    rec_i: np.ndarray | None
    rec_f: np.ndarray | None
    origins: np.ndarray
    directions: np.ndarray


def _run_raster(scene: Scene, graph: AdjacencyGraph, o, d, pix_tile, tile_ptr, tile_idx,
                near, far, record: bool) -> RasterOutput:
    npix = len(o)
    args = scene.kernel_args()
    rgb = np.zeros((npix, 3))
    tr = np.zeros(npix)
    cnt = np.zeros(npix, dtype=np.int64)
    offsets = np.zeros(npix, dtype=np.int64)
    ri = np.zeros((0, K.N_RI), dtype=np.int64)
    rf = np.zeros((0, K.N_RF))
    common = (o, d, pix_tile, tile_ptr, tile_idx) + args + (
        graph.indptr, graph.indices, float(near), float(far), scene.background)
    K.raster_kernel(*common, False, offsets, ri, rf, rgb, tr, cnt)
    if not record:
        return RasterOutput(rgb, tr, cnt, None, None, o, d)
    offsets[1:] = np.cumsum(cnt)[:-1]
    total = int(cnt.sum())
    ri = np.zeros((total, K.N_RI), dtype=np.int64)
    rf = np.zeros((total, K.N_RF))
    K.raster_kernel(*common, True, offsets, ri, rf, rgb, tr, cnt)
    return RasterOutput(rgb, tr, cnt, ri, rf, o, d)


def raster_pass(scene: Scene, graph: AdjacencyGraph, cam: Camera, tile_size: int = 16,
                record: bool = False, tiles: TileGrid | None = None) -> RasterOutput:
    if tiles is None:
        tiles = cull_to_tiles(cam, scene.pr, tile_size, cells=drawn_cells(scene, graph))
    o, d = cam.ray_grid()
    pix_tile = tiles.pixel_tiles(cam.width, cam.height)
    return _run_raster(scene, graph, o, d, pix_tile, tiles.indptr, tiles.indices, cam.near, cam.far, record)


def rasterize(scene: Scene, cech: AdjacencyGraph, cam: Camera, tile_size: int = 16,
              tiles: TileGrid | None = None) -> Image:
    """Render ``scene`` by walking each tile's sorted cell list per pixel.

    ``cech`` may be any superset of the alpha complex (the Cech complex is the
    intended choice). Matches ``trace_image`` up to floating-point noise.
    """
    out = raster_pass(scene, cech, cam, tile_size, tiles=tiles)
    return Image(cam.width, cam.height, out.rgb.reshape(cam.height, cam.width, 3))


def raster_rays(scene: Scene, graph: AdjacencyGraph, origin, directions,
                near: float = 0.0, far: float = np.inf, record: bool = False) -> RasterOutput:
    """Rasterize a bundle of rays sharing one origin, without tile culling."""
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origin, dtype=np.float64), directions.shape))
    order = painter_order(o[0], scene.positions, scene.radii, drawn_cells(scene, graph))
    tile_ptr = np.array([0, len(order)], dtype=np.int64)
    pix_tile = np.zeros(len(o), dtype=np.int64)
    return _run_raster(scene, graph, o, directions, pix_tile, tile_ptr, order, near, far, record)
