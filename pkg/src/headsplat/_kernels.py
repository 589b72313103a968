"""Compiled per-pixel loops for the splat rasterizer and the mesh target renderer.

Everything here is numba ``njit`` over plain float64/int64 arrays. Parallelism is
over 16x16 tiles; each pixel is owned by exactly one tile, and per-tile gradient
buffers land in disjoint slices of the entry array, so runs are bit-deterministic
regardless of thread count. All projection math, the covariance chain rule, and
parameter mapping live in :mod:`headsplat.rasterizer`; these kernels only see
screen-space quantities.
"""

from __future__ import annotations

import math
import os

import numpy as np
import numba
from numba import njit, prange

# workqueue is always available; TBB/OpenMP may be missing or too old
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

TILE = 16


@njit(cache=True)
def bin_splats(center, radius, width, height):
    """Bucket depth-sorted splats into 16x16 tiles.

    Returns (offsets, entries, touched): CSR tile lists (entries hold sorted-splat
    indices, in depth order within each tile) and a per-splat count of covered
    tiles (0 = invisible).
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    m = center.shape[0]
    tx0 = np.empty(m, np.int64)
    tx1 = np.empty(m, np.int64)
    ty0 = np.empty(m, np.int64)
    ty1 = np.empty(m, np.int64)
    touched = np.zeros(m, np.int64)
    counts = np.zeros(ntx * nty + 1, np.int64)
    for i in range(m):
        r = radius[i]
        if r <= 0.0:
            tx1[i] = -1
            tx0[i] = 0
            ty1[i] = -1
            ty0[i] = 0
            continue
        ax0 = int(math.floor((center[i, 0] - r) / TILE))
        ax1 = int(math.floor((center[i, 0] + r) / TILE))
        ay0 = int(math.floor((center[i, 1] - r) / TILE))
        ay1 = int(math.floor((center[i, 1] + r) / TILE))
        if ax1 < 0 or ay1 < 0 or ax0 >= ntx or ay0 >= nty:
            tx1[i] = -1
            tx0[i] = 0
            ty1[i] = -1
            ty0[i] = 0
            continue
        tx0[i] = max(0, ax0)
        tx1[i] = min(ntx - 1, ax1)
        ty0[i] = max(0, ay0)
        ty1[i] = min(nty - 1, ay1)
        n = (tx1[i] - tx0[i] + 1) * (ty1[i] - ty0[i] + 1)
        touched[i] = n
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    entries = np.empty(offsets[-1], np.int64)
    cursor = offsets[:-1].copy()
    for i in range(m):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                t = ty * ntx + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return offsets, entries, touched


@njit(cache=True, parallel=True)
def splat_forward(center, conic, color, alpha0, offsets, entries,
                  width, height, background, early_stop, power_cutoff, alpha_max):
    """Front-to-back compositing. Returns (rgb, accum_alpha, final_T, n_processed).

    ``n_processed`` counts tile-list entries walked per pixel before the
    transmittance early-out fired (the entry that pushed T below the threshold is
    composited, then the walk stops); the backward pass replays exactly that
    prefix in reverse.
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    img = np.empty((height, width, 3))
    accum = np.empty((height, width))
    final_t = np.empty((height, width))
    nproc = np.empty((height, width), np.int64)
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile % ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(width, x0 + TILE)
        y1 = min(height, y0 + TILE)
        e0 = offsets[tile]
        e1 = offsets[tile + 1]
        for py in range(y0, y1):
            pyc = py + 0.5
            for px in range(x0, x1):
                pxc = px + 0.5
                t_cur = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                acc = 0.0
                walked = e1 - e0
                for e in range(e0, e1):
                    i = entries[e]
                    dx = pxc - center[i, 0]
                    dy = pyc - center[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                        - conic[i, 1] * dx * dy
                    if power < -power_cutoff:
                        continue
                    a = alpha0[i] * math.exp(power)
                    if a > alpha_max:
                        a = alpha_max
                    w = t_cur * a
                    r += w * color[i, 0]
                    g += w * color[i, 1]
                    b += w * color[i, 2]
                    acc += w
                    t_cur *= 1.0 - a
                    if t_cur < early_stop:
                        walked = e - e0 + 1
                        break
                img[py, px, 0] = r + t_cur * background[0]
                img[py, px, 1] = g + t_cur * background[1]
                img[py, px, 2] = b + t_cur * background[2]
                accum[py, px] = acc
                final_t[py, px] = t_cur
                nproc[py, px] = walked
    return img, accum, final_t, nproc


@njit(cache=True, parallel=True)
def splat_backward(center, conic, color, alpha0, offsets, entries,
                   width, height, background, power_cutoff, alpha_max,
                   final_t, nproc, grad_rgb):
    """Adjoint of :func:`splat_forward` in screen space.

    Returns per-entry gradients, one row per (tile, splat) pair:
    [d_center_x, d_center_y, d_conic_a, d_conic_b, d_conic_c, d_r, d_g, d_b,
    d_alpha0]. Rows of the same splat across tiles are summed by the caller.
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    gdata = np.zeros((entries.shape[0], 9))
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile % ntx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(width, x0 + TILE)
        y1 = min(height, y0 + TILE)
        e0 = offsets[tile]
        for py in range(y0, y1):
            pyc = py + 0.5
            for px in range(x0, x1):
                pxc = px + 0.5
                walked = nproc[py, px]
                if walked == 0:
                    continue
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                t_after = final_t[py, px]
                # suffix contribution behind the current splat, background included
                s_r = t_after * background[0]
                s_g = t_after * background[1]
                s_b = t_after * background[2]
                for e in range(e0 + walked - 1, e0 - 1, -1):
                    i = entries[e]
                    dx = pxc - center[i, 0]
                    dy = pyc - center[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) \
                        - conic[i, 1] * dx * dy
                    if power < -power_cutoff:
                        continue
                    gexp = math.exp(power)
                    a = alpha0[i] * gexp
                    clamped = a > alpha_max
                    if clamped:
                        a = alpha_max
                    one_m = 1.0 - a
                    t_before = t_after / one_m
                    w = t_before * a
                    # color
                    gdata[e, 5] += gr * w
                    gdata[e, 6] += gg * w
                    gdata[e, 7] += gb * w
                    # alpha: dC/da = T_i * c_i - suffix / (1 - a)
                    dalpha = gr * (t_before * color[i, 0] - s_r / one_m) \
                        + gg * (t_before * color[i, 1] - s_g / one_m) \
                        + gb * (t_before * color[i, 2] - s_b / one_m)
                    if not clamped:
                        gdata[e, 8] += dalpha * gexp
                        dpow = dalpha * a
                        gdata[e, 2] += dpow * (-0.5 * dx * dx)
                        gdata[e, 3] += dpow * (-dx * dy)
                        gdata[e, 4] += dpow * (-0.5 * dy * dy)
                        gdata[e, 0] += dpow * (conic[i, 0] * dx + conic[i, 1] * dy)
                        gdata[e, 1] += dpow * (conic[i, 1] * dx + conic[i, 2] * dy)
                    s_r += w * color[i, 0]
                    s_g += w * color[i, 1]
                    s_b += w * color[i, 2]
                    t_after = t_before
    return gdata


@njit(cache=True)
def mesh_forward(pts2d, depth, colors, faces, width, height, background, near):
    """Z-buffered triangle rasterization with screen-space color interpolation.

    Returns (img, zbuf); uncovered pixels keep the background color and an
    infinite depth.
    """
    img = np.empty((height, width, 3))
    for py in range(height):
        for px in range(width):
            img[py, px, 0] = background[0]
            img[py, px, 1] = background[1]
            img[py, px, 2] = background[2]
    zbuf = np.full((height, width), np.inf)
    for t in range(faces.shape[0]):
        ia = faces[t, 0]
        ib = faces[t, 1]
        ic = faces[t, 2]
        if depth[ia] < near or depth[ib] < near or depth[ic] < near:
            continue
        ax = pts2d[ia, 0]
        ay = pts2d[ia, 1]
        bx = pts2d[ib, 0]
        by = pts2d[ib, 1]
        cx = pts2d[ic, 0]
        cy = pts2d[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        sgn = 1.0 if area > 0.0 else -1.0
        xmin = max(0, int(math.floor(min(ax, bx, cx) - 0.5)))
        xmax = min(width - 1, int(math.ceil(max(ax, bx, cx))))
        ymin = max(0, int(math.floor(min(ay, by, cy) - 0.5)))
        ymax = min(height - 1, int(math.ceil(max(ay, by, cy))))
        for py in range(ymin, ymax + 1):
            pyc = py + 0.5
            for px in range(xmin, xmax + 1):
                pxc = px + 0.5
                w0 = (bx - ax) * (pyc - ay) - (by - ay) * (pxc - ax)
                w1 = (cx - bx) * (pyc - by) - (cy - by) * (pxc - bx)
                w2 = (ax - cx) * (pyc - cy) - (ay - cy) * (pxc - cx)
                if sgn * w0 < 0.0 or sgn * w1 < 0.0 or sgn * w2 < 0.0:
                    continue
                la = w1 / area
                lb = w2 / area
                lc = w0 / area
                z = la * depth[ia] + lb * depth[ib] + lc * depth[ic]
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    img[py, px, 0] = la * colors[ia, 0] + lb * colors[ib, 0] + lc * colors[ic, 0]
                    img[py, px, 1] = la * colors[ia, 1] + lb * colors[ib, 1] + lc * colors[ic, 1]
                    img[py, px, 2] = la * colors[ia, 2] + lb * colors[ib, 2] + lc * colors[ic, 2]
    return img, zbuf
