import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from powerfoam.checks import random_cameras
from powerfoam.geometry import cech_complex
from powerfoam.optimizer import (ContributionRecords, LossWeights, PrimitiveStats, Schedule, TrainConfig, backward,
                                 densify, fit, loss_connect, loss_normal, loss_rgb, loss_sparse, loss_ssim, prune,
                                 ssim)
from powerfoam.optimizer.gradcheck import Coord, all_coords, finite_difference_check
from powerfoam.optimizer.losses import gaussian_window, total_loss
from powerfoam.presets import random_scene
from powerfoam.rasterizer import raster_pass, rasterize
from powerfoam.render_core import Camera, look_at


def records(t, a, n, d):
    t, a = np.atleast_1d(np.asarray(t, float)), np.atleast_1d(np.asarray(a, float))
    return ContributionRecords(t, a, np.atleast_2d(n).astype(float), np.atleast_2d(d).astype(float), len(t))


# -- losses ------------------------------------------------------------------------

def test_rgb_examples():
    a = np.random.default_rng(0).uniform(size=(4, 5, 3))
    assert loss_rgb(a, a) == 0.0
    assert loss_rgb(np.zeros((1, 1, 3)), np.ones((1, 1, 3))) == 1.0
    assert loss_rgb(np.full((1, 1, 3), 0.5), np.zeros((1, 1, 3))) == 0.25
    with pytest.raises(ValueError):
        loss_rgb(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def hand_ssim(a, b, sigma=1.5, size=11):
    """Direct per-window loop over the valid region."""
    g = gaussian_window(size, sigma)
    w = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, wd, ch = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(wd - size + 1):
            for c in range(ch):
                pa, pb = a[y:y + size, x:x + size, c], b[y:y + size, x:x + size, c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_loop():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(32, 32, 3))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    assert abs(ssim(a, b) - hand_ssim(a, b)) <= 1e-6


def test_ssim_matches_skimage():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(32, 32, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=2)
    assert abs(ssim(a, b) - ref) <= 1e-6


def test_ssim_loss_limits():
    a = np.full((16, 16, 3), 0.4)
    assert loss_ssim(a, a) == pytest.approx(0.0, abs=1e-12)
    assert loss_ssim(a, a + 1e-9) < 1e-8
    with pytest.raises(ValueError):
        loss_ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_normal_examples():
    assert loss_normal(records(1.0, 0.5, [0, 0, -1], [0, 0, 1])) == 0.0
    assert loss_normal(records(1.0, 0.5, [0.8, 0.6, 0], [1, 0, 0])) == pytest.approx(0.32)


@given(st.floats(0, 1), st.floats(0, 0.5), st.floats(-1, 1))
def test_normal_linear_in_alpha(t, a, c):
    n, d = [c, np.sqrt(1 - c * c), 0], [1, 0, 0]
    assert loss_normal(records(t, 2 * a, n, d)) == pytest.approx(2 * loss_normal(records(t, a, n, d)))


def test_sparse_examples():
    empty = ContributionRecords(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), 0)
    assert loss_sparse(empty) == 0.0
    assert loss_sparse(records(1.0, 0.25, [0, 0, 1], [0, 0, 1])) == 0.25


def test_sparse_opaque_front_cell_hides_the_rest():
    # density is huge, so the first cell absorbs everything
    s = random_scene(2, 0, radius=(0.5, 0.5), density=(1e4, 1e4))
    s = s.replace(positions=np.array([[0, 0, 0.0], [0, 0, 0.8]]), normals=np.array([[0, 0, -1.0]] * 2))
    cam = Camera.pinhole(8, 8, 2, 2, look_at(np.array([0, 0, -3.0]), np.zeros(3), up=(0, 1, 0)), 4, 4)

    def back_contribution(scene):
        out = raster_pass(scene, cech_complex(scene.pr), cam, record=True)
        rec = ContributionRecords.from_raster(out, scene)
        return float(np.sum((rec.transmittance * rec.alpha)[rec.cell == 1]))

    assert back_contribution(s) == 0.0
    # the back cell is in view once the front one is transparent
    assert back_contribution(s.replace(densities=np.array([0.0, 1e4]))) > 1.0


def test_connect_examples():
    def two(d, r1, r2):
        s = random_scene(2, 0).replace(positions=np.array([[0, 0, 0], [d, 0, 0.0]]), radii=np.array([r1, r2]))
        return loss_connect(s, cech_complex(s.pr))
    assert two(5.0, 1.0, 1.0) == 0.0
    assert two(3.0, 2.0, 2.0) == pytest.approx(1.0)
    # concentric spheres: the graph is built by hand as positions coincide
    s = random_scene(2, 0).replace(positions=np.zeros((2, 3)), radii=np.ones(2))
    from powerfoam.geometry import AdjacencyGraph
    assert loss_connect(s, AdjacencyGraph.from_pairs(2, [(0, 1)])) == 4.0


def test_total_loss_composition():
    s = random_scene(15, 3)
    cam = random_cameras(s, 1, 0, 24)[0]
    cech = cech_complex(s.pr)
    out = raster_pass(s, cech, cam, record=True)
    img = out.rgb.reshape(24, 24, 3)
    target = np.random.default_rng(0).uniform(size=img.shape)
    rec = ContributionRecords.from_raster(out, s)
    lam = {"ssim": 0.3, "normal": 0.07, "sparse": 0.011, "connect": 1e-3}
    b = total_loss(img, target, rec, s, cech, lam)
    assert b.total == (b.rgb + 0.3 * b.ssim + 0.07 * b.normal + 0.011 * b.sparse + 1e-3 * b.connect)
    assert b.rgb == loss_rgb(img, target)
    assert b.connect == loss_connect(s, cech)


# -- schedules -------------------------------------------------------------------

def test_schedule_endpoints():
    w = LossWeights()
    first, last = w.at(0, 2000), w.at(1999, 2000)
    assert first == {"ssim": 0.2, "normal": 0.1, "sparse": 0.1, "connect": 1e-4}
    assert last == {"ssim": 0.2, "normal": 0.01, "sparse": 1e-4, "connect": 1e-7}


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.integers(2, 500))
def test_schedule_monotone(a, b, total):
    s = Schedule(a, b)
    v = np.array([s(k, total) for k in range(total)])
    assert np.all(np.diff(v) <= 1e-15 * a) if b <= a else np.all(np.diff(v) >= -1e-15 * b)


def test_schedule_rejects_negative():
    with pytest.raises(ValueError):
        Schedule(-1.0, 0.1)


# -- densify / prune -------------------------------------------------------------------

def test_densify_zero_count_is_noop():
    s = random_scene(5, 0)
    st_ = PrimitiveStats(np.ones(5), np.ones(5))
    assert densify(s, st_, 0, np.random.default_rng(0)) is s


def test_densify_one_child_near_parent():
    s = random_scene(3, 1)
    st_ = PrimitiveStats(np.array([0.0, 2.0, 0.0]), np.zeros(3))
    out = densify(s, st_, 1, np.random.default_rng(0))
    assert out.n_cells == 4
    child = out.cell(3)
    assert np.linalg.norm(child.site.position - s.positions[1]) <= 0.5 * s.radii[1]
    assert child.site.radius == pytest.approx(0.7 * s.radii[1])
    np.testing.assert_array_equal(out.normals[3], s.normals[1])
    # surviving cells are untouched
    np.testing.assert_array_equal(out.positions[:3], s.positions)
    np.testing.assert_array_equal(out.detail_values[:3], s.detail_values)


def test_densify_multinomial_frequencies():
    n, draws = 6, 100_000
    s = random_scene(n, 2, radius=(0.01, 0.02))
    err = np.array([1.0, 3.0, 0.0, 2.0, 0.5, 3.5])
    from powerfoam.optimizer.train import densify_with_stats
    _, _, parents = densify_with_stats(s, PrimitiveStats(err, np.zeros(n)), draws, np.random.default_rng(5))
    freq = np.bincount(parents, minlength=n) / draws
    assert np.abs(freq - err / err.sum()).max() <= 0.02


def test_prune_threshold_zero_keeps_all():
    s = random_scene(5, 0)
    assert prune(s, PrimitiveStats(np.zeros(5), np.zeros(5)), 0.0).n_cells == 5


def test_prune_removes_unrendered_cell():
    s = random_scene(3, 0)
    out = prune(s, PrimitiveStats(np.zeros(3), np.array([0.5, 0.0, 0.2])), 0.01)
    assert out.n_cells == 2
    np.testing.assert_array_equal(out.positions, s.positions[[0, 2]])


def test_pruning_occluded_cell_leaves_image():
    # a small cell buried behind an opaque wall
    s = random_scene(2, 4, radius=(0.5, 0.5), density=(1e3, 1e3))
    s = s.replace(positions=np.array([[0, 0, 0.0], [0, 0, 0.45]]), radii=np.array([1.0, 0.2]),
                  normals=np.array([[0, 0, -1.0], [0, 0, -1.0]]))
    cam = Camera.pinhole(20, 20, 8, 8, look_at(np.array([0, 0, -3.0]), np.zeros(3), up=(0, 1, 0)), 16, 16)
    before = rasterize(s, cech_complex(s.pr), cam).pixels
    out = prune(s, PrimitiveStats(np.zeros(2), np.array([1.0, 0.0])), 0.01)
    after = rasterize(out, cech_complex(out.pr), cam).pixels
    assert out.n_cells == 1
    assert np.abs(before - after).max() <= 1e-6


def test_prune_keeps_steiner():
    from powerfoam.raytracer import insert_steiner
    from powerfoam.presets import make_preset
    s = insert_steiner(make_preset("sparse", 0), 0)
    out = prune(s, PrimitiveStats.zeros(s.n_cells), 0.5)
    assert out.n_cells == int(s.is_steiner.sum())


# -- gradients ----------------------------------------------------------------------

def test_zero_density_has_no_appearance_gradient():
    s = random_scene(10, 6)
    s = s.replace(densities=np.zeros(s.n_cells))
    cam = random_cameras(s, 1, 2, 24)[0]
    target = np.random.default_rng(0).uniform(size=(24, 24, 3))
    _, g = backward(s, cam, target)
    for name in ("values", "uv", "displacement"):
        assert np.all(getattr(g, name) == 0.0), name
    assert g.gamma == 0.0


def test_single_cell_radius_gradient():
    s = random_scene(1, 0, radius=(0.8, 0.8), density=(3.0, 3.0), view_var=0.2, disp_scale=0.0)
    s = s.replace(positions=np.zeros((1, 3)), normals=np.array([[0, 0, -1.0]]))
    cam = Camera.pinhole(20, 20, 8, 8, look_at(np.array([0, 0, -3.0]), np.zeros(3), up=(0, 1, 0)), 16, 16)
    target = np.full((16, 16, 3), 0.3)
    lam = LossWeights().at(0, 1)
    cech = cech_complex(s.pr)
    _, g = backward(s, cam, target, lam, cech)
    res = finite_difference_check(s, cech, cam, target, lam, g, coords=[Coord("radius", (0,))])
    assert not res.boundary[0]
    assert abs(res.analytic[0] - res.numeric[0]) <= 1e-3 * abs(res.numeric[0])


def test_random_scene_gradient_sweep():
    s = random_scene(8, 11, radius=(0.3, 0.5), disp_scale=0.3)
    cam = random_cameras(s, 1, 4, 20)[0]
    target = np.random.default_rng(3).uniform(size=(20, 20, 3))
    lam = LossWeights().at(0, 1)
    cech = cech_complex(s.pr)
    _, g = backward(s, cam, target, lam, cech)
    coords = all_coords(s)[::3]
    res = finite_difference_check(s, cech, cam, target, lam, g, coords=coords)
    assert res.pass_rate() >= 0.95


# -- fit and config ---------------------------------------------------------------------

def two_views(s, size=16):
    cams = random_cameras(s, 2, 0, size)
    cech = cech_complex(s.pr)
    return [(c, rasterize(s, cech, c)) for c in cams]


def test_fit_zero_iterations_returns_input():
    s = random_scene(6, 0)
    assert fit(s, two_views(s), TrainConfig(iterations=0)) is s


def test_fit_needs_two_views():
    s = random_scene(6, 0)
    with pytest.raises(ValueError):
        fit(s, two_views(s)[:1], TrainConfig(iterations=3))


def test_fit_is_deterministic_and_logs():
    s = random_scene(12, 1)
    views = two_views(s)
    start = s.replace(densities=s.densities * 0.5)
    cfg = TrainConfig(iterations=6, log_every=2, densify_every=2)
    logs = []
    a = fit(start, views, cfg, log=logs.append)
    b = fit(start, views, cfg)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.detail_values, b.detail_values)
    assert [r["iteration"] for r in logs] == [0, 2, 4, 5]
    assert set(logs[0]) >= {"iteration", "total", "rgb", "ssim", "normal", "sparse", "connect", "psnr", "cells"}


def test_config_round_trip_and_errors():
    cfg = TrainConfig.from_dict({"iterations": 10, "lr_position": 1, "weights": {"normal": [0.2, 0.02]}})
    assert cfg.iterations == 10 and cfg.lr_position == 1.0
    assert cfg.weights.normal == Schedule(0.2, 0.02)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"iterations": "x"}, {"iterations": 1.5}, {"bogus": 1}, {"weights": 3}, {"seed": True},
                {"weights": {"sharpness": 1.0}}):
        with pytest.raises(ValueError):
            TrainConfig.from_dict(bad)
