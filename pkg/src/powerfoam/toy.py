"""The three-boxes fitting experiment: ground-truth views, initialization and
held-out evaluation."""

from __future__ import annotations

import time

import numpy as np

from .geometry import Ray, cech_complex
from .presets import SLABS, boxes_scene
from .rasterizer import rasterize
from .reference import fine_step_ray
from .render_core import Camera, Image, orbit_cameras
from .scene import Scene

VIEW_DISTANCE = 3.5
VIEW_FOV = 50.0


def box_surface_samples(n: int, seed: int = 0) -> np.ndarray:
    """``n`` points spread over the slab surfaces in proportion to area."""
    rng = np.random.default_rng(seed)
    faces = []
    for center, half, _ in SLABS:
        c, h = np.asarray(center), np.asarray(half)
        for ax in range(3):
            a, b = [k for k in range(3) if k != ax]
            for sgn in (-1.0, 1.0):
                faces.append((c, h, ax, a, b, sgn, 4.0 * h[a] * h[b]))
    area = np.array([f[-1] for f in faces])
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    pts = np.empty((n, 3))
    for k, fi in enumerate(pick):
        c, h, ax, a, b, sgn, _ = faces[fi]
        p = c.copy()
        p[ax] += sgn * h[ax]
        p[a] += rng.uniform(-h[a], h[a])
        p[b] += rng.uniform(-h[b], h[b])
        pts[k] = p
    return pts


def toy_cameras(n: int, size: int = 64, phase: float = 0.0, elevation: float = 0.35) -> list[Camera]:
    return orbit_cameras(np.zeros(3), VIEW_DISTANCE, n, width=size, height=size, fov_deg=VIEW_FOV,
                         elevation=elevation, phase=phase)


def fine_step_image(scene: Scene, cam: Camera, dt: float = 1e-4) -> Image:
    o, d = cam.ray_grid()
    px = np.array([fine_step_ray(scene, Ray(o[k], d[k]), cam.near, cam.far, dt)[0] for k in range(len(o))])
    return Image(cam.width, cam.height, px.reshape(cam.height, cam.width, 3))


def toy_views(scene: Scene, cams, oracle: bool = True) -> list[tuple[Camera, Image]]:
    """Ground-truth images: fine-step oracle renders, or rasterized if
    ``oracle`` is false."""
    if oracle:
        return [(c, fine_step_image(scene, c)) for c in cams]
    cech = cech_complex(scene.pr)
    return [(c, rasterize(scene, cech, c)) for c in cams]


def heldout_psnr(scene: Scene, views) -> float:
    """PSNR over all held-out pixels pooled together."""
    cech = cech_complex(scene.pr)
    err = [np.mean((rasterize(scene, cech, c).pixels - t.pixels) ** 2) for c, t in views]
    return float(-10.0 * np.log10(np.mean(err)))


def run_boxes_fit(config, n_init: int = 300, init_noise: float = 0.03, seed: int = 0, oracle: bool = True,
                  n_train: int = 16, n_test: int = 4, size: int = 64, log=None) -> dict:
    """Fit the boxes preset from a noisy surface sample; returns metrics."""
    from .optimizer import fit, init_scene
    gt = boxes_scene(seed)
    t0 = time.perf_counter()
    train = toy_views(gt, toy_cameras(n_train, size), oracle)
    test = toy_views(gt, toy_cameras(n_test, size, phase=np.pi / n_test, elevation=0.5), oracle)
    t_gt = time.perf_counter() - t0
    scene0 = init_scene(box_surface_samples(n_init, seed), seed=seed, noise=init_noise)
    history = []

    def record(rec):
        history.append(rec)
        if log is not None:
            log(rec)

    t0 = time.perf_counter()
    scene = fit(scene0, train, config, log=record)
    t_fit = time.perf_counter() - t0
    return {"scene": scene, "history": history, "heldout_psnr": heldout_psnr(scene, test),
            "initial_psnr": heldout_psnr(scene0, test), "gt_seconds": t_gt, "fit_seconds": t_fit}
