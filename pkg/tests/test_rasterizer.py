import numpy as np
import pytest

from powerfoam.checks import painter_order_violations, random_cameras, random_rays
from powerfoam.geometry import PowerSite, alpha_complex, cech_complex, power_dual
from powerfoam.presets import random_scene
from powerfoam.rasterizer import (TileGrid, cull_to_tiles, painter_order, raster_pass, rasterize, sort_key,
                                  sphere_pixel_bounds)
from powerfoam.raytracer import trace_image
from powerfoam.render_core import Camera, look_at
from powerfoam.scene import ring_uv

from conftest import unit


def test_sort_key_examples():
    q = np.array([1.0, 2.0, 3.0])
    assert sort_key(q, PowerSite(q, 1.0)) == -1.0
    a = PowerSite(q + [5.0, 0, 0], 1.0)
    b = PowerSite(q + [0, 5.0, 0], 2.0)
    assert sort_key(q, b) < sort_key(q, a)


def test_painter_order_ties_by_index():
    pos = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [3.0, 0, 0]])
    rad = np.array([0.5, 0.5, 0.5, 0.1])
    np.testing.assert_array_equal(painter_order(np.zeros(3), pos, rad), [0, 1, 2, 3])


def axis_camera(f=100.0, size=64):
    return Camera.pinhole(f, f, size / 2, size / 2, np.eye(4), size, size)


def test_sphere_box_on_axis():
    x0, x1, y0, y1 = sphere_pixel_bounds(axis_camera(), [0, 0, 10.0], 1.0)
    half = 100 * np.tan(np.arcsin(0.1))
    assert half >= 10.0
    for lo, hi in ((x0, x1), (y0, y1)):
        assert 32 - lo >= 10.0 - 1e-9 and hi - 32 >= 10.0 - 1e-9
        assert hi - lo == pytest.approx(2 * half)


def test_cull_on_axis_sphere_covers_central_tiles():
    cam = axis_camera()
    grid = cull_to_tiles(cam, (np.array([[0, 0, 10.0]]), np.array([1.0])), tile_size=8)
    for tx in range(grid.tiles_x):
        for ty in range(grid.tiles_y):
            x0, y0 = tx * 8, ty * 8
            near = max(abs(32 - np.clip(32, x0, x0 + 8)), abs(32 - np.clip(32, y0, y0 + 8)))
            if near < 10:
                assert 0 in grid.cells(tx, ty)


@pytest.mark.parametrize("model", ["pinhole", "fisheye"])
def test_camera_inside_sphere_in_every_tile(model):
    cam = Camera(model, 20, 20, 16, 16, np.eye(4), 32, 32)
    grid = cull_to_tiles(cam, (np.array([[0.1, 0, 0.2]]), np.array([1.0])))
    assert all(0 in grid.cells(tx, ty) for tx in range(grid.tiles_x) for ty in range(grid.tiles_y))


def test_sphere_behind_pinhole_is_culled():
    grid = cull_to_tiles(axis_camera(), (np.array([[0, 0, -5.0]]), np.array([1.0])))
    assert len(grid.indices) == 0


def test_tile_lists_sorted_by_key():
    s = random_scene(120, 2)
    cam = random_cameras(s, 1, 0, 64)[0]
    grid = cull_to_tiles(cam, s.pr)
    key = np.sum((s.positions - cam.origin) ** 2, axis=1) - s.radii ** 2
    for t in range(grid.n_tiles):
        cells = grid.indices[grid.indptr[t]:grid.indptr[t + 1]]
        assert np.all(np.diff(key[cells]) >= 0)


def ray_hits_sphere(o, d, c, r):
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    return disc > 0 and -b + np.sqrt(disc) > 0


@pytest.mark.parametrize("model", ["pinhole", "fisheye"])
@pytest.mark.parametrize("seed", range(3))
def test_culling_is_conservative(model, seed):
    s = random_scene(60, seed, extent=1.0)
    cam = random_cameras(s, 1, seed, 48, model=model, inside_fraction=0.5)[0]
    grid = cull_to_tiles(cam, s.pr, tile_size=8)
    o, d = cam.ray_grid()
    tiles = grid.pixel_tiles(cam.width, cam.height)
    for p in range(0, len(d), 7):
        listed = set(grid.indices[grid.indptr[tiles[p]]:grid.indptr[tiles[p] + 1]].tolist())
        for i in range(s.n_cells):
            if ray_hits_sphere(o[p], d[p], s.positions[i], s.radii[i]):
                assert i in listed, (p, i)


def full_tiles(scene, cam, tile_size=16):
    order = painter_order(cam.origin, scene.positions, scene.radii, np.flatnonzero(scene.densities > 0))
    tx, ty = -(-cam.width // tile_size), -(-cam.height // tile_size)
    indptr = np.arange(tx * ty + 1, dtype=np.int64) * len(order)
    return TileGrid(tile_size, tx, ty, indptr, np.tile(order, tx * ty))


@pytest.mark.parametrize("model", ["pinhole", "fisheye"])
def test_culled_equals_unculled(model):
    s = random_scene(80, 4)
    cech = cech_complex(s.pr)
    for cam in random_cameras(s, 3, 1, 48, model=model, inside_fraction=0.3):
        a = rasterize(s, cech, cam).pixels
        b = rasterize(s, cech, cam, tiles=full_tiles(s, cam)).pixels
        assert np.abs(a - b).max() <= 1e-12


def test_tile_size_independent():
    s = random_scene(80, 5)
    cech = cech_complex(s.pr)
    cam = random_cameras(s, 1, 2, 40)[0]
    ref = rasterize(s, cech, cam, tile_size=16).pixels
    for ts in (1, 7, 64):
        assert np.abs(rasterize(s, cech, cam, tile_size=ts).pixels - ref).max() <= 1e-12


def test_single_cell_matches_trace():
    s = random_scene(1, 0, radius=(0.8, 0.9))
    cam = Camera.pinhole(30, 30, 16, 16, look_at(np.array([0, 0, -3.0]), s.positions[0]), 32, 32)
    a = rasterize(s, cech_complex(s.pr), cam).pixels
    b, _ = trace_image(s, power_dual(s.pr), cam)
    assert np.abs(a - b.pixels).max() <= 1e-6
    assert a.max() > 0


@pytest.mark.parametrize("model", ["pinhole", "fisheye"])
@pytest.mark.parametrize("seed", range(3))
def test_raster_equals_trace(model, seed):
    s = random_scene(60, 10 + seed)
    cech, dual = cech_complex(s.pr), power_dual(s.pr)
    for cam in random_cameras(s, 2, seed, 48, model=model, inside_fraction=0.3):
        a = rasterize(s, cech, cam).pixels
        b, _ = trace_image(s, dual, cam)
        assert np.abs(a - b.pixels).max() <= 1e-4


@pytest.mark.parametrize("n, seed, cam_seed", [(60, 7, 3), (60, 2, 10), (120, 1, 17), (120, 4, 20),
                                                (120, 5, 21), (120, 6, 22)])
def test_cech_and_alpha_lists_render_identically(n, seed, cam_seed):
    # these scenes hold nested balls, cells missing their own ball and hidden sites
    s = random_scene(n, seed)
    dual = power_dual(s.pr)
    cech, alpha = cech_complex(s.pr), alpha_complex(s.pr, dual)
    for cam in random_cameras(s, 4, cam_seed, 32, inside_fraction=0.5):
        assert np.abs(rasterize(s, cech, cam).pixels - rasterize(s, alpha, cam).pixels).max() <= 1e-12


def test_entry_order_follows_sort_key():
    s = random_scene(60, 8)
    o, d = random_rays(s, 10000, 0)
    bad, checked, _ = painter_order_violations(s, cech_complex(s.pr), o, d)
    assert checked > 500
    assert bad == 0


def test_record_mode_matches_plain():
    s = random_scene(40, 9)
    cech = cech_complex(s.pr)
    cam = random_cameras(s, 1, 4, 32)[0]
    plain = raster_pass(s, cech, cam)
    rec = raster_pass(s, cech, cam, record=True)
    np.testing.assert_array_equal(plain.rgb, rec.rgb)
    assert len(rec.rec_i) == plain.counts.sum()


def test_dipole_side_is_opaque_from_front():
    # a large opaque cell whose normal faces the camera shows its colour
    s = random_scene(1, 0, radius=(1.0, 1.0), density=(50.0, 50.0), view_var=0.0, disp_scale=0.0)
    s = s.replace(positions=np.zeros((1, 3)), normals=np.array([[0, 0, -1.0]]),
                  detail_uv=ring_uv(s.k, 1.0)[None])
    cam = Camera.pinhole(20, 20, 8, 8, np.eye(4) @ np.diag([1, 1, 1, 1.0]), 16, 16)
    cam = Camera.pinhole(20, 20, 8, 8, look_at(np.array([0, 0, -4.0]), np.zeros(3), up=(0, 1, 0)), 16, 16)
    img = rasterize(s, cech_complex(s.pr), cam).pixels
    np.testing.assert_allclose(img[8, 8], s.detail_values[0, 0, 0], atol=1e-6)
