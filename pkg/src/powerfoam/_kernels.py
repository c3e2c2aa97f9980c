"""Compiled per-ray kernels.

Both renderers share ``_bounded_interval``, ``_occupied``, ``_radiance`` and
the compositing step; they differ only in how the candidate cells of a ray are
enumerated (tile list sorted by power vs. adjacency walk).

Each emitted segment can be recorded together with the constraint that fixed
each endpoint (``BOUND``/``SPHERE``/``PLANE``/``DIPOLE``); the differentiable
renderer rebuilds the endpoints from those constraints.
"""

import math

import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; use OpenMP or the built-in pool
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

BOUND = 0    # near/far plane or world-box / walk start
SPHERE = 1   # bounding sphere of the cell
PLANE = 2    # radical plane towards neighbour ``j``
DIPOLE = 3   # displaced dipole plane

EARLY_STOP_T = 1e-4
PARALLEL_EPS = 1e-12

# integer record columns
R_PIX, R_CELL, R_LOK, R_LOJ, R_HIK, R_HIJ, R_CLAMP, R_PAR = range(8)
N_RI = 8
# float record columns
F_LO, F_HI, F_T, F_ALPHA, F_TCOL = range(5)
N_RF = 5


@njit(cache=True, fastmath=False)
def _bounded_interval(ox, oy, oz, dx, dy, dz, i, pos, rad, ptr, idx, tmin, tmax):
    """Interval where cell ``i`` is power-minimal (over ``idx`` neighbours) and
    inside its sphere. Returns ``(lo, hi, lo_kind, lo_j, hi_kind, hi_j)``;
    empty when ``hi <= lo``."""
    px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
    r = rad[i]
    cx, cy, cz = ox - px, oy - py, oz - pz
    b = cx * dx + cy * dy + cz * dz
    disc = b * b - (cx * cx + cy * cy + cz * cz - r * r)
    if disc <= 0.0:
        return 0.0, 0.0, BOUND, -1, BOUND, -1
    h = math.sqrt(disc)
    lo, lok, loj = tmin, BOUND, -1
    hi, hik, hij = tmax, BOUND, -1
    s0 = -b - h
    s1 = -b + h
    if s0 > lo:
        lo, lok = s0, SPHERE
    if s1 < hi:
        hi, hik = s1, SPHERE
    if not hi > lo:
        return 0.0, 0.0, BOUND, -1, BOUND, -1
    rr = r * r
    for k in range(ptr[i], ptr[i + 1]):
        j = idx[k]
        ex, ey, ez = pos[j, 0] - px, pos[j, 1] - py, pos[j, 2] - pz
        kh = 0.5 * (ex * ex + ey * ey + ez * ez + rr - rad[j] * rad[j])
        num = kh - (cx * ex + cy * ey + cz * ez)
        den = dx * ex + dy * ey + dz * ez
        if den > 0.0:
            t = num / den
            if t < hi:
                hi, hik, hij = t, PLANE, j
        elif den < 0.0:
            t = num / den
            if t > lo:
                lo, lok, loj = t, PLANE, j
        elif num < 0.0:
            return 0.0, 0.0, BOUND, -1, BOUND, -1
        if not hi > lo:
            return 0.0, 0.0, BOUND, -1, BOUND, -1
    return lo, hi, lok, loj, hik, hij


@njit(cache=True)
def _displacement(q0, q1, i, uv, disp, tau, r):
    """Soft-Voronoi displacement and clamp state (-1, 0, +1)."""
    k = uv.shape[1]
    if k == 0:
        return 0.0, 0
    m = -np.inf
    for a in range(k):
        l = -tau * math.sqrt((q0 - uv[i, a, 0]) ** 2 + (q1 - uv[i, a, 1]) ** 2)
        if l > m:
            m = l
    num = 0.0
    den = 0.0
    for a in range(k):
        w = math.exp(-tau * math.sqrt((q0 - uv[i, a, 0]) ** 2 + (q1 - uv[i, a, 1]) ** 2) - m)
        num += w * disp[i, a]
        den += w
    dval = num / den
    if dval > r:
        return r, 1
    if dval < -r:
        return -r, -1
    return dval, 0


@njit(cache=True)
def _occupied(ox, oy, oz, dx, dy, dz, i, lo, hi, lok, loj, hik, hij,
              pos, rad, nrm, fu, fv, uv, disp, tau):
    """Clip ``[lo, hi]`` to the occupied side of the displaced dipole plane.

    Returns ``(lo, hi, lok, loj, hik, hij, t_color, clamp, parallel)``.
    """
    px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
    nx, ny, nz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
    dn = dx * nx + dy * ny + dz * nz
    pn = (px - ox) * nx + (py - oy) * ny + (pz - oz) * nz
    if abs(dn) > PARALLEL_EPS:
        tb = pn / dn
        rx, ry, rz = ox + tb * dx - px, oy + tb * dy - py, oz + tb * dz - pz
        q0 = rx * fu[i, 0] + ry * fu[i, 1] + rz * fu[i, 2]
        q1 = rx * fv[i, 0] + ry * fv[i, 1] + rz * fv[i, 2]
        dval, clamp = _displacement(q0, q1, i, uv, disp, tau, rad[i])
        ts = (pn + dval) / dn
        if dn < 0.0:
            if ts > lo:
                lo, lok, loj = ts, DIPOLE, -1
        else:
            if ts < hi:
                hi, hik, hij = ts, DIPOLE, -1
        return lo, hi, lok, loj, hik, hij, ts, clamp, 0
    rx, ry, rz = ox + lo * dx - px, oy + lo * dy - py, oz + lo * dz - pz
    q0 = rx * fu[i, 0] + ry * fu[i, 1] + rz * fu[i, 2]
    q1 = rx * fv[i, 0] + ry * fv[i, 1] + rz * fv[i, 2]
    dval, clamp = _displacement(q0, q1, i, uv, disp, tau, rad[i])
    if rx * nx + ry * ny + rz * nz > dval:
        return 0.0, 0.0, lok, loj, hik, hij, lo, clamp, 1
    return lo, hi, lok, loj, hik, hij, lo, clamp, 1


@njit(cache=True)
def _radiance(x0, x1, x2, dx, dy, dz, i, pos, fu, fv, uv, vals, axes, gamma, tau):
    k = uv.shape[1]
    if k == 0:
        return 0.0, 0.0, 0.0
    rx, ry, rz = x0 - pos[i, 0], x1 - pos[i, 1], x2 - pos[i, 2]
    q0 = rx * fu[i, 0] + ry * fu[i, 1] + rz * fu[i, 2]
    q1 = rx * fv[i, 0] + ry * fv[i, 1] + rz * fv[i, 2]
    na = axes.shape[0]
    s = np.empty(na)
    m = -np.inf
    for a in range(na):
        s[a] = gamma * (dx * axes[a, 0] + dy * axes[a, 1] + dz * axes[a, 2])
        if s[a] > m:
            m = s[a]
    ssum = 0.0
    for a in range(na):
        s[a] = math.exp(s[a] - m)
        ssum += s[a]
    w = np.empty(k)
    m = -np.inf
    for b in range(k):
        w[b] = -tau * math.sqrt((q0 - uv[i, b, 0]) ** 2 + (q1 - uv[i, b, 1]) ** 2)
        if w[b] > m:
            m = w[b]
    wsum = 0.0
    for b in range(k):
        w[b] = math.exp(w[b] - m)
        wsum += w[b]
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    for b in range(k):
        for a in range(na):
            ww = w[b] * s[a]
            c0 += ww * vals[i, b, a, 0]
            c1 += ww * vals[i, b, a, 1]
            c2 += ww * vals[i, b, a, 2]
    norm = 1.0 / (wsum * ssum)
    return max(c0 * norm, 0.0), max(c1 * norm, 0.0), max(c2 * norm, 0.0)


# ---------------------------------------------------------------------------
# rasterization


@njit(cache=True)
def _raster_pixel(p, o, d, lst_lo, lst_hi, tile_idx,
                  pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
                  ptr, idx, near, far, bg, write, base, rec_i, rec_f, out_rgb, out_t):
    ox, oy, oz = o[p, 0], o[p, 1], o[p, 2]
    dx, dy, dz = d[p, 0], d[p, 1], d[p, 2]
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    nseg = 0
    for li in range(lst_lo, lst_hi):
        i = tile_idx[li]
        sigma = dens[i]
        if sigma <= 0.0:
            continue
        lo, hi, lok, loj, hik, hij = _bounded_interval(ox, oy, oz, dx, dy, dz, i, pos, rad, ptr, idx, near, far)
        if not hi > lo:
            continue
        lo, hi, lok, loj, hik, hij, tc, clamp, par = _occupied(
            ox, oy, oz, dx, dy, dz, i, lo, hi, lok, loj, hik, hij, pos, rad, nrm, fu, fv, uv, disp, tau)
        if not hi > lo:
            continue
        att = math.exp(-sigma * (hi - lo))
        alpha = 1.0 - att
        r0, r1, r2 = _radiance(ox + tc * dx, oy + tc * dy, oz + tc * dz, dx, dy, dz, i,
                               pos, fu, fv, uv, vals, axes, gamma, tau)
        if write:
            k = base + nseg
            rec_i[k, R_PIX] = p
            rec_i[k, R_CELL] = i
            rec_i[k, R_LOK] = lok
            rec_i[k, R_LOJ] = loj
            rec_i[k, R_HIK] = hik
            rec_i[k, R_HIJ] = hij
            rec_i[k, R_CLAMP] = clamp
            rec_i[k, R_PAR] = par
            rec_f[k, F_LO] = lo
            rec_f[k, F_HI] = hi
            rec_f[k, F_T] = T
            rec_f[k, F_ALPHA] = alpha
            rec_f[k, F_TCOL] = tc
        nseg += 1
        wgt = T * alpha
        c0 += wgt * r0
        c1 += wgt * r1
        c2 += wgt * r2
        T *= att
        if T < EARLY_STOP_T:
            break
    out_rgb[p, 0] = c0 + T * bg[0]
    out_rgb[p, 1] = c1 + T * bg[1]
    out_rgb[p, 2] = c2 + T * bg[2]
    out_t[p] = T
    return nseg


@njit(cache=True, parallel=True)
def raster_kernel(o, d, pix_tile, tile_ptr, tile_idx,
                  pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
                  ptr, idx, near, far, bg, write, offsets, rec_i, rec_f, out_rgb, out_t, out_n):
    npix = o.shape[0]
    for p in prange(npix):
        t = pix_tile[p]
        out_n[p] = _raster_pixel(p, o, d, tile_ptr[t], tile_ptr[t + 1], tile_idx,
                                 pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
                                 ptr, idx, near, far, bg, write, offsets[p], rec_i, rec_f, out_rgb, out_t)


# ---------------------------------------------------------------------------
# ray tracing


@njit(cache=True)
def _slab(ox, oy, oz, dx, dy, dz, box):
    t0 = -np.inf
    t1 = np.inf
    o = (ox, oy, oz)
    dd = (dx, dy, dz)
    for a in range(3):
        if dd[a] != 0.0:
            ta = (box[0, a] - o[a]) / dd[a]
            tb = (box[1, a] - o[a]) / dd[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        elif o[a] < box[0, a] or o[a] > box[1, a]:
            return 1.0, 0.0
    return t0, t1


@njit(cache=True)
def _locate(x0, x1, x2, pos, rad):
    best = 0
    bv = np.inf
    for j in range(pos.shape[0]):
        v = (x0 - pos[j, 0]) ** 2 + (x1 - pos[j, 1]) ** 2 + (x2 - pos[j, 2]) ** 2 - rad[j] * rad[j]
        if v < bv:
            bv = v
            best = j
    return best


@njit(cache=True)
def _trace_one(p, o, d, pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
               dptr, didx, box, near, far, bg, budget, out_rgb, out_t, out_n):
    """Walk one ray through the power diagram; returns a status code
    (0 ok, 1 step budget exceeded)."""
    ox, oy, oz = o[p, 0], o[p, 1], o[p, 2]
    dx, dy, dz = d[p, 0], d[p, 1], d[p, 2]
    T = 1.0
    c0 = 0.0
    c1 = 0.0
    c2 = 0.0
    visited = 0
    status = 0
    tb0, tb1 = _slab(ox, oy, oz, dx, dy, dz, box)
    t = max(tb0, 0.0)
    if tb1 > t and pos.shape[0] > 0:
        c = _locate(ox + t * dx, oy + t * dy, oz + t * dz, pos, rad)
        steps = 0
        while True:
            steps += 1
            if steps > budget:
                status = 1
                break
            px, py, pz = pos[c, 0], pos[c, 1], pos[c, 2]
            rc2 = rad[c] * rad[c]
            cx, cy, cz = ox - px, oy - py, oz - pz
            t_exit = tb1
            nxt = -1
            for k in range(dptr[c], dptr[c + 1]):
                j = didx[k]
                ex, ey, ez = pos[j, 0] - px, pos[j, 1] - py, pos[j, 2] - pz
                den = dx * ex + dy * ey + dz * ez
                if den <= 0.0:
                    continue
                kh = 0.5 * (ex * ex + ey * ey + ez * ez + rc2 - rad[j] * rad[j])
                tj = (kh - (cx * ex + cy * ey + cz * ez)) / den
                if tj < t_exit:
                    t_exit = tj
                    nxt = j
            if t_exit < t:
                t_exit = t
            visited += 1
            sigma = dens[c]
            if sigma > 0.0 and t_exit > t:
                b = cx * dx + cy * dy + cz * dz
                disc = b * b - (cx * cx + cy * cy + cz * cz - rc2)
                if disc > 0.0:
                    h = math.sqrt(disc)
                    lo = max(t, -b - h, near)
                    hi = min(t_exit, -b + h, far)
                    if hi > lo:
                        lo, hi, lok, loj, hik, hij, tc, clamp, par = _occupied(
                            ox, oy, oz, dx, dy, dz, c, lo, hi, BOUND, -1, BOUND, -1,
                            pos, rad, nrm, fu, fv, uv, disp, tau)
                        if hi > lo:
                            att = math.exp(-sigma * (hi - lo))
                            r0, r1, r2 = _radiance(ox + tc * dx, oy + tc * dy, oz + tc * dz, dx, dy, dz, c,
                                                   pos, fu, fv, uv, vals, axes, gamma, tau)
                            wgt = T * (1.0 - att)
                            c0 += wgt * r0
                            c1 += wgt * r1
                            c2 += wgt * r2
                            T *= att
            if T < EARLY_STOP_T or nxt < 0 or t_exit >= far:
                break
            t = t_exit
            c = nxt
    out_rgb[p, 0] = c0 + T * bg[0]
    out_rgb[p, 1] = c1 + T * bg[1]
    out_rgb[p, 2] = c2 + T * bg[2]
    out_t[p] = T
    out_n[p] = visited
    return status


@njit(cache=True, parallel=True)
def trace_kernel(o, d, pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
                 dptr, didx, box, near, far, bg, budget, out_rgb, out_t, out_n, out_status):
    for p in prange(o.shape[0]):
        out_status[p] = _trace_one(p, o, d, pos, rad, nrm, dens, fu, fv, uv, disp, vals, axes, gamma, tau,
                                   dptr, didx, box, near, far, bg, budget, out_rgb, out_t, out_n)


@njit(cache=True)
def walk_cells(o, d, pos, rad, dptr, didx, box, budget, out_cells, out_t):
    """Sequence of cells visited by one ray and their exit parameters
    (diagnostics); returns the count, or -1 on budget overflow."""
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    tb0, tb1 = _slab(ox, oy, oz, dx, dy, dz, box)
    t = max(tb0, 0.0)
    if not tb1 > t:
        return 0
    c = _locate(ox + t * dx, oy + t * dy, oz + t * dz, pos, rad)
    n = 0
    while True:
        if n >= budget or n >= out_cells.shape[0]:
            return -1
        px, py, pz = pos[c, 0], pos[c, 1], pos[c, 2]
        rc2 = rad[c] * rad[c]
        t_exit = tb1
        nxt = -1
        for k in range(dptr[c], dptr[c + 1]):
            j = didx[k]
            ex, ey, ez = pos[j, 0] - px, pos[j, 1] - py, pos[j, 2] - pz
            den = dx * ex + dy * ey + dz * ez
            if den <= 0.0:
                continue
            kh = 0.5 * (ex * ex + ey * ey + ez * ez + rc2 - rad[j] * rad[j])
            tj = (kh - ((ox - px) * ex + (oy - py) * ey + (oz - pz) * ez)) / den
            if tj < t_exit:
                t_exit = tj
                nxt = j
        if t_exit < t:
            t_exit = t
        out_cells[n] = c
        out_t[n] = t_exit
        n += 1
        if nxt < 0:
            return n
        t = t_exit
        c = nxt


# ---------------------------------------------------------------------------
# diagnostics


@njit(cache=True, parallel=True)
def all_cell_intervals(o, d, pos, rad, ptr, idx, tmin, tmax, out_lo, out_hi):
    """Bounded-cell interval of every cell along every ray (``(R, N)`` outputs)."""
    for p in prange(o.shape[0]):
        for i in range(pos.shape[0]):
            lo, hi, a, b, c, e = _bounded_interval(o[p, 0], o[p, 1], o[p, 2], d[p, 0], d[p, 1], d[p, 2],
                                                   i, pos, rad, ptr, idx, tmin, tmax)
            out_lo[p, i] = lo
            out_hi[p, i] = hi
