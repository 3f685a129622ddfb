"""Numba-accelerated kernels.

Jit-compiled twins of :mod:`occflow.kernels_numpy` with identical signatures.
All kernels are single-threaded, compiled without fastmath, and use a fixed
accumulation order, so results are bit-deterministic within a build. The
gather/scatter kernels (warp, correlation, census) are plain loops; the conv
kernels gather patches with jitted loops and multiply through ``np.dot`` so
they hit the same BLAS as the numpy backend. The resize kernels are
re-exported from the numpy backend: they are memory-bound matrix products
that vectorized numpy already handles optimally.

Importing this module raises ImportError when numba is unavailable;
``occflow.backend`` catches that and falls back to the numpy backend.
"""

import math

import numpy as np
from numba import njit

from .kernels_numpy import (  # noqa: F401  (re-exported as-is)
    conv_output_size,
    resize_bilinear_backward,
    resize_bilinear_forward,
)

_JIT = dict(cache=True, fastmath=False, boundscheck=False)


@njit(**_JIT)
def _pad_image(x, padding):
    """Zero-pad one (C, H, W) image on both spatial sides."""
    c, h, w = x.shape
    if padding == 0:
        return x.copy()
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w] = x
    return xp


@njit(**_JIT)
def _im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """Gather conv patches of one padded image into a (ci*kh*kw, oh*ow) matrix."""
    ci = xp.shape[0]
    cols = np.empty((ci * kh * kw, out_h * out_w), dtype=xp.dtype)
    k = 0
    for c in range(ci):
        for u in range(kh):
            for v in range(kw):
                vd = v * dilation
                dst = cols[k]
                idx = 0
                for i in range(out_h):
                    row = xp[c, i * stride + u * dilation]
                    for j in range(out_w):
                        dst[idx] = row[vd + j * stride]
                        idx += 1
                k += 1
    return cols


@njit(**_JIT)
def conv2d_forward(x, w, b, stride, padding, dilation):
    n, ci, h, wi = x.shape
    co, _, kh, kw = w.shape
    khe = (kh - 1) * dilation + 1
    kwe = (kw - 1) * dilation + 1
    out_h = (h + 2 * padding - khe) // stride + 1
    out_w = (wi + 2 * padding - kwe) // stride + 1
    w2 = np.ascontiguousarray(w).reshape(co, ci * kh * kw)
    y = np.empty((n, co, out_h, out_w), dtype=x.dtype)
    for bi in range(n):
        xp = _pad_image(x[bi], padding)
        cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
        yb = np.dot(w2, cols)
        for o in range(co):
            bias = b[o]
            yo = y[bi, o]
            src = yb[o]
            idx = 0
            for i in range(out_h):
                for j in range(out_w):
                    yo[i, j] = src[idx] + bias
                    idx += 1
    return y


@njit(**_JIT)
def conv2d_backward_input(grad_y, w, stride, padding, dilation, in_h, in_w):
    n, co, out_h, out_w = grad_y.shape
    ci = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    w2t = np.ascontiguousarray(
        np.ascontiguousarray(w).reshape(co, ci * kh * kw).T)
    gx = np.empty((n, ci, in_h, in_w), dtype=grad_y.dtype)
    hp = in_h + 2 * padding
    wp = in_w + 2 * padding
    for bi in range(n):
        gy2 = np.ascontiguousarray(grad_y[bi]).reshape(co, out_h * out_w)
        gcols = np.dot(w2t, gy2)
        # col2im: scatter-add the patch gradients back onto the padded grid
        gxp = np.zeros((ci, hp, wp), dtype=grad_y.dtype)
        k = 0
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    vd = v * dilation
                    src = gcols[k]
                    idx = 0
                    for i in range(out_h):
                        row = gxp[c, i * stride + u * dilation]
                        for j in range(out_w):
                            row[vd + j * stride] += src[idx]
                            idx += 1
                    k += 1
        gx[bi] = gxp[:, padding:padding + in_h, padding:padding + in_w]
    return gx


@njit(**_JIT)
def conv2d_backward_weight(x, grad_y, kh, kw, stride, padding, dilation):
    n, ci, h, wi = x.shape
    co = grad_y.shape[1]
    out_h = grad_y.shape[2]
    out_w = grad_y.shape[3]
    gw2 = np.zeros((co, ci * kh * kw), dtype=x.dtype)
    for bi in range(n):
        xp = _pad_image(x[bi], padding)
        cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
        gy2 = np.ascontiguousarray(grad_y[bi]).reshape(co, out_h * out_w)
        gw2 += np.dot(gy2, cols.T)
    return gw2.reshape(co, ci, kh, kw)


@njit(**_JIT)
def bilinear_warp_forward(src, flow, off_y, off_x):
    n, c, hs, ws = src.shape
    h = flow.shape[2]
    w = flow.shape[3]
    out = np.zeros((n, c, h, w), dtype=src.dtype)
    valid = np.zeros((n, 1, h, w), dtype=src.dtype)
    for bi in range(n):
        for y in range(h):
            for x in range(w):
                xx = x + off_x + flow[bi, 0, y, x]
                yy = y + off_y + flow[bi, 1, y, x]
                if xx != xx or yy != yy:  # NaN flow: leave zero, invalid
                    continue
                if 0.0 <= xx <= ws - 1.0 and 0.0 <= yy <= hs - 1.0:
                    valid[bi, 0, y, x] = 1.0
                if xx <= -1.0 or xx >= ws or yy <= -1.0 or yy >= hs:
                    continue  # all four taps out of frame
                x0 = int(math.floor(xx))
                y0 = int(math.floor(yy))
                fx = xx - x0
                fy = yy - y0
                for ty in range(2):
                    iy = y0 + ty
                    if iy < 0 or iy >= hs:
                        continue
                    wy = fy if ty == 1 else 1.0 - fy
                    for tx in range(2):
                        ix = x0 + tx
                        if ix < 0 or ix >= ws:
                            continue
                        wt = wy * (fx if tx == 1 else 1.0 - fx)
                        for ci in range(c):
                            out[bi, ci, y, x] += wt * src[bi, ci, iy, ix]
    return out, valid


@njit(**_JIT)
def bilinear_warp_backward(src, flow, off_y, off_x, grad_out):
    n, c, hs, ws = src.shape
    h = flow.shape[2]
    w = flow.shape[3]
    gsrc = np.zeros_like(src)
    gflow = np.zeros_like(flow)
    for bi in range(n):
        for y in range(h):
            for x in range(w):
                xx = x + off_x + flow[bi, 0, y, x]
                yy = y + off_y + flow[bi, 1, y, x]
                if xx != xx or yy != yy:
                    continue
                if xx <= -1.0 or xx >= ws or yy <= -1.0 or yy >= hs:
                    continue
                x0 = int(math.floor(xx))
                y0 = int(math.floor(yy))
                fx = xx - x0
                fy = yy - y0
                in_x0 = 0 <= x0 < ws
                in_x1 = 0 <= x0 + 1 < ws
                in_y0 = 0 <= y0 < hs
                in_y1 = 0 <= y0 + 1 < hs
                gx_acc = 0.0
                gy_acc = 0.0
                for ci in range(c):
                    v00 = src[bi, ci, y0, x0] if in_y0 and in_x0 else 0.0
                    v01 = src[bi, ci, y0, x0 + 1] if in_y0 and in_x1 else 0.0
                    v10 = src[bi, ci, y0 + 1, x0] if in_y1 and in_x0 else 0.0
                    v11 = src[bi, ci, y0 + 1, x0 + 1] if in_y1 and in_x1 else 0.0
                    g = grad_out[bi, ci, y, x]
                    gx_acc += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                    gy_acc += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                    if in_y0 and in_x0:
                        gsrc[bi, ci, y0, x0] += g * (1.0 - fy) * (1.0 - fx)
                    if in_y0 and in_x1:
                        gsrc[bi, ci, y0, x0 + 1] += g * (1.0 - fy) * fx
                    if in_y1 and in_x0:
                        gsrc[bi, ci, y0 + 1, x0] += g * fy * (1.0 - fx)
                    if in_y1 and in_x1:
                        gsrc[bi, ci, y0 + 1, x0 + 1] += g * fy * fx
                gflow[bi, 0, y, x] = gx_acc
                gflow[bi, 1, y, x] = gy_acc
    return gsrc, gflow


@njit(**_JIT)
def correlation_forward(f1, f2, max_disp):
    n, c, h, w = f1.shape
    dsz = 2 * max_disp + 1
    out = np.zeros((n, dsz * dsz, h, w), dtype=f1.dtype)
    inv_c = 1.0 / c
    for bi in range(n):
        k = 0
        for dy in range(-max_disp, max_disp + 1):
            for dx in range(-max_disp, max_disp + 1):
                ok = out[bi, k]
                y_lo = max(0, -dy)
                y_hi = min(h, h - dy)
                x_lo = max(0, -dx)
                x_hi = min(w, w - dx)
                for y in range(y_lo, y_hi):
                    for x in range(x_lo, x_hi):
                        s = 0.0
                        for ci in range(c):
                            s += f1[bi, ci, y, x] * f2[bi, ci, y + dy, x + dx]
                        ok[y, x] = s * inv_c
                k += 1
    return out


@njit(**_JIT)
def correlation_backward(f1, f2, max_disp, grad_out):
    n, c, h, w = f1.shape
    gf1 = np.zeros_like(f1)
    gf2 = np.zeros_like(f2)
    inv_c = 1.0 / c
    for bi in range(n):
        k = 0
        for dy in range(-max_disp, max_disp + 1):
            for dx in range(-max_disp, max_disp + 1):
                gk = grad_out[bi, k]
                y_lo = max(0, -dy)
                y_hi = min(h, h - dy)
                x_lo = max(0, -dx)
                x_hi = min(w, w - dx)
                for y in range(y_lo, y_hi):
                    for x in range(x_lo, x_hi):
                        g = gk[y, x] * inv_c
                        for ci in range(c):
                            gf1[bi, ci, y, x] += g * f2[bi, ci, y + dy, x + dx]
                            gf2[bi, ci, y + dy, x + dx] += g * f1[bi, ci, y, x]
                k += 1
    return gf1, gf2


@njit(**_JIT)
def census_forward(gray, window):
    n = gray.shape[0]
    h = gray.shape[2]
    w = gray.shape[3]
    r = window // 2
    nk = window * window - 1
    out = np.zeros((n, nk, h, w), dtype=gray.dtype)
    for bi in range(n):
        g = gray[bi, 0]
        k = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy == 0 and dx == 0:
                    continue
                ok = out[bi, k]
                for y in range(h):
                    ny = y + dy
                    if ny < 0 or ny >= h:
                        continue
                    grow = g[y]
                    nrow = g[ny]
                    orow = ok[y]
                    for x in range(w):
                        nx = x + dx
                        if 0 <= nx < w:
                            t = nrow[nx] - grow[x]
                            orow[x] = t / math.sqrt(0.81 + t * t)
                k += 1
    return out


@njit(**_JIT)
def census_backward(gray, window, grad_out):
    n = gray.shape[0]
    h = gray.shape[2]
    w = gray.shape[3]
    r = window // 2
    ggray = np.zeros_like(gray)
    for bi in range(n):
        g = gray[bi, 0]
        gg = ggray[bi, 0]
        k = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy == 0 and dx == 0:
                    continue
                gk = grad_out[bi, k]
                for y in range(h):
                    ny = y + dy
                    if ny < 0 or ny >= h:
                        continue
                    for x in range(w):
                        nx = x + dx
                        if 0 <= nx < w:
                            t = g[ny, nx] - g[y, x]
                            base = 0.81 + t * t
                            d = gk[y, x] * 0.81 / (base * math.sqrt(base))
                            gg[ny, nx] += d
                            gg[y, x] -= d
                k += 1
    return ggray
