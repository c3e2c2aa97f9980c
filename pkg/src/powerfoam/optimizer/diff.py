"""Differentiable re-evaluation of a rasterized frame.

The compiled rasterizer decides the discrete structure of the frame: which
cells each pixel crosses, in which order, and which constraint (sphere,
radical plane towards neighbour ``j``, dipole plane, clip bound) fixes each
segment endpoint. Here that structure is replayed in float64 torch with every
continuous quantity rebuilt from the scene parameters, so reverse-mode
autodiff yields the gradient of the loss with membership held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .. import _kernels as K
from ..geometry import AdjacencyGraph
from ..rasterizer import RasterOutput, raster_pass
from ..render_core import Camera
from ..scene import Scene
from .losses import SSIM_C1, SSIM_C2, LossBreakdown, gaussian_window

torch.set_num_threads(1)  # thread count changes reduction order

FIELDS = ("position", "radius", "normal", "density", "uv", "displacement", "values")


@dataclass(eq=False)
class ParamGradient:
    """Loss gradient per parameter. ``normal`` is taken w.r.t. the
    unnormalized 3-vector (at the current unit normal) and ``density`` w.r.t.
    the pre-softplus value."""

    position: np.ndarray      # (N, 3)
    radius: np.ndarray        # (N,)
    normal: np.ndarray        # (N, 3)
    density: np.ndarray       # (N,)
    uv: np.ndarray            # (N, K, 2)
    displacement: np.ndarray  # (N, K)
    values: np.ndarray        # (N, K, 8, 3)
    gamma: float

    def arrays(self) -> dict:
        return {f: getattr(self, f) for f in FIELDS}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values()) and np.isfinite(self.gamma)

    @classmethod
    def zeros_like(cls, scene: Scene) -> "ParamGradient":
        return cls(np.zeros_like(scene.positions), np.zeros_like(scene.radii), np.zeros_like(scene.normals),
                   np.zeros_like(scene.densities), np.zeros_like(scene.detail_uv),
                   np.zeros_like(scene.detail_disp), np.zeros_like(scene.detail_values), 0.0)


def _t(a):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float64)


def _dot(a, b):
    return (a * b).sum(-1)


def _frames(n: torch.Tensor):
    """Differentiable tangent frames with the reference axis choice frozen."""
    axis = np.argmin(np.abs(n.detach().numpy()), axis=1)
    e = torch.zeros_like(n)
    e[torch.arange(len(n)), torch.as_tensor(axis)] = 1.0
    u = e - _dot(e, n)[:, None] * n
    u = u / torch.linalg.norm(u, dim=1, keepdim=True)
    return u, torch.cross(n, u, dim=1)


def _softmin_dist(q, uv, tau):
    """Soft-Voronoi weights of ``q`` (S, 2) against sites ``uv`` (S, K, 2)."""
    d2 = ((q[:, None, :] - uv) ** 2).sum(-1)
    return torch.softmax(-tau * torch.sqrt(d2.clamp_min(1e-300)), dim=1)


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of (H, W, 3) images over the valid region."""
    g = _t(gaussian_window())
    k = len(g)

    def blur(x):
        x = x.permute(2, 0, 1)[None]  # (1, C, H, W)
        c = x.shape[1]
        x = torch.nn.functional.conv2d(x, g.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
        return torch.nn.functional.conv2d(x, g.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    m = ((2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
         / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)))
    return m.mean()


@dataclass(eq=False)
class FrameResult:
    losses: LossBreakdown
    grad: ParamGradient | None
    image: np.ndarray          # (H, W, 3)
    raster: RasterOutput
    weight: np.ndarray         # (S,) T * alpha per segment


def differentiable_frame(scene: Scene, cech: AdjacencyGraph, cam: Camera, target: np.ndarray, lam: dict,
                         raster: RasterOutput | None = None, need_grad: bool = True) -> FrameResult:
    """Loss of one posed target and, optionally, its gradient."""
    if raster is None:
        raster = raster_pass(scene, cech, cam, record=True)
    ri, rf = raster.rec_i, raster.rec_f
    npix = len(raster.origins)
    h, w = cam.height, cam.width

    pos = _t(scene.positions).requires_grad_(need_grad)
    rad = _t(scene.radii).requires_grad_(need_grad)
    nraw = _t(scene.normals).requires_grad_(need_grad)
    sig = _t(scene.densities).requires_grad_(need_grad)
    uv = _t(scene.detail_uv).requires_grad_(need_grad)
    disp = _t(scene.detail_disp).requires_grad_(need_grad)
    vals = _t(scene.detail_values).requires_grad_(need_grad)
    gamma = torch.tensor(scene.gamma, dtype=torch.float64, requires_grad=need_grad)
    tau = scene.temperature
    axes = _t(scene.axes)
    bg = _t(scene.background)

    nrm = nraw / torch.linalg.norm(nraw, dim=1, keepdim=True)
    fu, fv = _frames(nrm) if scene.n_cells else (nrm, nrm)

    pix = torch.as_tensor(ri[:, K.R_PIX])
    cell = torch.as_tensor(ri[:, K.R_CELL])
    o = _t(raster.origins)[pix]
    d = _t(raster.directions)[pix]
    P = pos[cell]
    r = rad[cell]
    n = nrm[cell]
    U, V = fu[cell], fv[cell]

    # sphere endpoints
    c = o - P
    b = _dot(c, d)
    disc = b * b - (_dot(c, c) - r * r)
    hs = torch.sqrt(disc.clamp_min(1e-300))
    s0, s1 = -b - hs, -b + hs

    def plane_t(kind, j):
        use = kind == K.PLANE
        jj = torch.as_tensor(np.where(use, j, 0))
        delta = pos[jj] - P
        kh = 0.5 * (_dot(delta, delta) + r * r - rad[jj] ** 2)
        den = _dot(d, delta)
        den = torch.where(torch.as_tensor(use), den, torch.ones_like(den))
        return (kh - _dot(c, delta)) / den

    lo_k, hi_k = ri[:, K.R_LOK], ri[:, K.R_HIK]
    t_lo_plane = plane_t(lo_k, ri[:, K.R_LOJ])
    t_hi_plane = plane_t(hi_k, ri[:, K.R_HIJ])

    # dipole plane
    par = torch.as_tensor(ri[:, K.R_PAR] == 1)
    clamp = _t(ri[:, K.R_CLAMP])
    dn = _dot(d, n)
    dn_safe = torch.where(par, torch.ones_like(dn), dn)
    pn = _dot(P - o, n)

    def displacement(x):
        rel = x - P
        q = torch.stack([_dot(rel, U), _dot(rel, V)], dim=1)
        wts = _softmin_dist(q, uv[cell], tau)
        raw = (wts * disp[cell]).sum(1)
        return torch.where(clamp != 0, clamp * r, raw)

    def pick(kind, bound, sphere, plane):
        k = torch.as_tensor(kind)
        out = torch.where(k == K.SPHERE, sphere, _t(bound))
        return torch.where(k == K.PLANE, plane, out)

    lo0 = pick(lo_k, rf[:, K.F_LO], s0, t_lo_plane)
    hi0 = pick(hi_k, rf[:, K.F_HI], s1, t_hi_plane)
    # displacement is read where the ray meets the base plane, or at the
    # segment entry when the ray runs parallel to it
    t_base = torch.where(par, lo0, pn / dn_safe)
    D = displacement(o + t_base[:, None] * d) if scene.k else torch.zeros_like(r)
    ts = (pn + D) / dn_safe
    lo = torch.where(torch.as_tensor(lo_k == K.DIPOLE), ts, lo0)
    hi = torch.where(torch.as_tensor(hi_k == K.DIPOLE), ts, hi0)
    t_col = torch.where(par, lo, ts)

    # appearance
    if scene.k:
        xc = o + t_col[:, None] * d
        rel = xc - P
        q = torch.stack([_dot(rel, U), _dot(rel, V)], dim=1)
        wk = _softmin_dist(q, uv[cell], tau)                       # (S, K)
        sa = torch.softmax(gamma * (d @ axes.T), dim=1)            # (S, 8)
        col = torch.einsum("sk,sa,skac->sc", wk, sa, vals[cell]).clamp_min(0.0)
    else:
        col = torch.zeros_like(o)

    x = sig[cell] * (hi - lo)
    alpha = 1.0 - torch.exp(-x)
    # exclusive per-pixel prefix sums of optical depth in a padded layout
    counts = raster.counts
    starts = np.zeros(npix, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    slot = np.arange(len(ri)) - starts[ri[:, K.R_PIX]]
    width = int(counts.max()) if len(counts) and len(ri) else 0
    pad = torch.zeros((npix, width + 1), dtype=torch.float64)
    pad = pad.index_put((pix, torch.as_tensor(slot)), x)
    cum = torch.cumsum(pad, dim=1)
    T = torch.exp(-(cum - pad))[pix, torch.as_tensor(slot)]
    T_end = torch.exp(-cum[:, -1])
    wgt = T * alpha
    img = torch.zeros((npix, 3), dtype=torch.float64).index_add(0, pix, wgt[:, None] * col)
    img = (img + T_end[:, None] * bg).reshape(h, w, 3)

    tgt = _t(target).reshape(h, w, 3)
    l_rgb = ((img - tgt) ** 2).mean()
    l_ssim = 1.0 - ssim_torch(img, tgt)
    l_normal = (wgt * _dot(n, d).clamp_min(0.0) ** 2).sum() / npix
    l_sparse = wgt.sum() / npix
    if len(cech.edges):
        ei, ej = torch.as_tensor(cech.edges[:, 0]), torch.as_tensor(cech.edges[:, 1])
        dij = torch.linalg.norm(pos[ei] - pos[ej], dim=1)
        l_connect = ((rad[ei] + rad[ej] - dij).clamp_min(0.0) ** 2).sum()
    else:
        l_connect = torch.zeros((), dtype=torch.float64)
    total = (l_rgb + lam["ssim"] * l_ssim + lam["normal"] * l_normal + lam["sparse"] * l_sparse
             + lam["connect"] * l_connect)
    losses = LossBreakdown(*(float(v.detach()) for v in (total, l_rgb, l_ssim, l_normal, l_sparse, l_connect)))

    grad = None
    if need_grad:
        leaves = [pos, rad, nraw, sig, uv, disp, vals, gamma]
        gs = torch.autograd.grad(total, leaves, allow_unused=True)
        gs = [np.zeros(tuple(l.shape)) if g is None else g.numpy().copy() for g, l in zip(gs, leaves)]
        # chain rule through density = softplus(raw): d softplus / d raw = 1 - exp(-density)
        gs[3] = gs[3] * -np.expm1(-scene.densities)
        grad = ParamGradient(*gs[:7], float(gs[7]))
    return FrameResult(losses, grad, img.detach().numpy(), raster, wgt.detach().numpy())


def backward(scene: Scene, cam: Camera, target, lam: dict | None = None, cech: AdjacencyGraph | None = None):
    """Loss breakdown and analytic gradient of the composite loss for one view."""
    from ..geometry import cech_complex
    from .losses import LossWeights
    if lam is None:
        lam = LossWeights().at(0, 1)
    if cech is None:
        cech = cech_complex(scene.pr)
    tgt = target.pixels if hasattr(target, "pixels") else np.asarray(target)
    res = differentiable_frame(scene, cech, cam, tgt, lam)
    return res.losses, res.grad
