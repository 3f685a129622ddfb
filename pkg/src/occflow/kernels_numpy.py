"""Pure-numpy reference kernels.

Every function here has a loop-based twin in ``kernels_numba``; the two
backends expose identical signatures and are interchangeable through
``occflow.backend``. All arrays are NCHW, C-contiguous, float32 or float64.
Forward kernels return freshly allocated arrays of the input dtype; backward
kernels return gradients shaped like the corresponding forward inputs.

These implementations favour clarity and vectorized numpy; they are the
ground truth the numba backend is tested against.
"""

import numpy as np

from .errors import DimensionError


def conv_output_size(size, k, stride, padding, dilation):
    k_eff = (k - 1) * dilation + 1
    return (size + 2 * padding - k_eff) // stride + 1


def _conv_windows(x, kh, kw, stride, padding, dilation):
    # (n, ci, out_h, out_w, kh, kw) view of the padded input
    n, ci, h, w = x.shape
    kh_eff = (kh - 1) * dilation + 1
    kw_eff = (kw - 1) * dilation + 1
    xp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))
    return xp, win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d_forward(x, w, b, stride, padding, dilation):
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    _, win = _conv_windows(x, w.shape[2], w.shape[3], stride, padding, dilation)
    y = np.einsum("nihwkl,oikl->nohw", win, w, optimize=True)
    y += b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward_input(grad_y, w, stride, padding, dilation, in_h, in_w):
    n, co, out_h, out_w = grad_y.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gxp = np.zeros((n, ci, in_h + 2 * padding, in_w + 2 * padding), dtype=grad_y.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("oi,nohw->nihw", w[:, :, i, j], grad_y, optimize=True)
            gxp[:, :,
                i * dilation:i * dilation + stride * out_h:stride,
                j * dilation:j * dilation + stride * out_w:stride] += contrib
    return np.ascontiguousarray(gxp[:, :, padding:padding + in_h, padding:padding + in_w])


def conv2d_backward_weight(x, grad_y, kh, kw, stride, padding, dilation):
    _, win = _conv_windows(x, kh, kw, stride, padding, dilation)
    gw = np.einsum("nihwkl,nohw->oikl", win, grad_y, optimize=True)
    return np.ascontiguousarray(gw)


def bilinear_warp_forward(src, flow, off_y, off_x):
    """Sample src at (x + off_x + u, y + off_y + v) with zero fill outside.

    Returns (out, valid) where valid marks sample points inside
    [0, Ws-1] x [0, Hs-1] of the source.
    """
    n, c, hs, ws = src.shape
    h, w = flow.shape[2], flow.shape[3]
    dt = src.dtype
    out = np.zeros((n, c, h, w), dtype=dt)
    valid = np.zeros((n, 1, h, w), dtype=dt)
    grid_x = np.arange(w, dtype=dt)[None, :]
    grid_y = np.arange(h, dtype=dt)[:, None]
    for bi in range(n):
        xx = grid_x + (flow[bi, 0] + dt.type(off_x))
        yy = grid_y + (flow[bi, 1] + dt.type(off_y))
        valid[bi, 0] = ((xx >= 0) & (xx <= ws - 1) & (yy >= 0) & (yy <= hs - 1)).astype(dt)
        x0 = np.floor(xx)
        y0 = np.floor(yy)
        fx = (xx - x0).astype(dt)
        fy = (yy - y0).astype(dt)
        x0i = x0.astype(np.int64)
        y0i = y0.astype(np.int64)
        for ty in (0, 1):
            for tx in (0, 1):
                ix = x0i + tx
                iy = y0i + ty
                inb = (ix >= 0) & (ix < ws) & (iy >= 0) & (iy < hs)
                wt = (fy if ty else 1 - fy) * (fx if tx else 1 - fx)
                wt = np.where(inb, wt, dt.type(0))
                ixc = np.clip(ix, 0, ws - 1)
                iyc = np.clip(iy, 0, hs - 1)
                out[bi] += wt[None, :, :] * src[bi][:, iyc, ixc]
    return out, valid


def bilinear_warp_backward(src, flow, off_y, off_x, grad_out):
    n, c, hs, ws = src.shape
    h, w = flow.shape[2], flow.shape[3]
    dt = src.dtype
    gsrc = np.zeros_like(src)
    gflow = np.zeros_like(flow)
    grid_x = np.arange(w, dtype=dt)[None, :]
    grid_y = np.arange(h, dtype=dt)[:, None]
    for bi in range(n):
        xx = grid_x + (flow[bi, 0] + dt.type(off_x))
        yy = grid_y + (flow[bi, 1] + dt.type(off_y))
        x0 = np.floor(xx)
        y0 = np.floor(yy)
        fx = (xx - x0).astype(dt)
        fy = (yy - y0).astype(dt)
        x0i = x0.astype(np.int64)
        y0i = y0.astype(np.int64)
        vals = {}
        for ty in (0, 1):
            for tx in (0, 1):
                ix = x0i + tx
                iy = y0i + ty
                inb = (ix >= 0) & (ix < ws) & (iy >= 0) & (iy < hs)
                ixc = np.clip(ix, 0, ws - 1)
                iyc = np.clip(iy, 0, hs - 1)
                v = src[bi][:, iyc, ixc]
                v = np.where(inb[None], v, dt.type(0))
                vals[(ty, tx)] = v
                wt = (fy if ty else 1 - fy) * (fx if tx else 1 - fx)
                wt = np.where(inb, wt, dt.type(0))
                # scatter-add the tap contribution into the source gradient
                flat_idx = (iyc * ws + ixc).ravel()
                for ch in range(c):
                    wgt = (wt * grad_out[bi, ch]).ravel()
                    gsrc[bi, ch] += np.bincount(
                        flat_idx, weights=wgt, minlength=hs * ws
                    ).reshape(hs, ws).astype(dt, copy=False)
        gsum = grad_out[bi]
        dx = (1 - fy)[None] * (vals[(0, 1)] - vals[(0, 0)]) \
            + fy[None] * (vals[(1, 1)] - vals[(1, 0)])
        dy = (1 - fx)[None] * (vals[(1, 0)] - vals[(0, 0)]) \
            + fx[None] * (vals[(1, 1)] - vals[(0, 1)])
        gflow[bi, 0] = (gsum * dx).sum(axis=0)
        gflow[bi, 1] = (gsum * dy).sum(axis=0)
    return gsrc, gflow


def _interp_matrix(n_out, n_in, dt):
    # half-pixel-center (align_corners OFF) row interpolation matrix
    m = np.zeros((n_out, n_in), dtype=dt)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    f = (src - i0).astype(dt)
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def resize_bilinear_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    my = _interp_matrix(out_h, h, x.dtype)
    mx = _interp_matrix(out_w, w, x.dtype)
    t = np.einsum("ph,nchw->ncpw", my, x, optimize=True)
    y = np.einsum("qw,ncpw->ncpq", mx, t, optimize=True)
    return np.ascontiguousarray(y)


def resize_bilinear_backward(grad_y, in_h, in_w):
    n, c, out_h, out_w = grad_y.shape
    my = _interp_matrix(out_h, in_h, grad_y.dtype)
    mx = _interp_matrix(out_w, in_w, grad_y.dtype)
    t = np.einsum("ph,ncpq->nchq", my, grad_y, optimize=True)
    gx = np.einsum("qw,nchq->nchw", mx, t, optimize=True)
    return np.ascontiguousarray(gx)


def correlation_forward(f1, f2, max_disp):
    n, c, h, w = f1.shape
    d = 2 * max_disp + 1
    f2p = np.zeros((n, c, h + 2 * max_disp, w + 2 * max_disp), dtype=f1.dtype)
    f2p[:, :, max_disp:max_disp + h, max_disp:max_disp + w] = f2
    out = np.empty((n, d * d, h, w), dtype=f1.dtype)
    k = 0
    inv_c = f1.dtype.type(1.0 / c)
    for dy in range(-max_disp, max_disp + 1):
        for dx in range(-max_disp, max_disp + 1):
            shifted = f2p[:, :, max_disp + dy:max_disp + dy + h,
                          max_disp + dx:max_disp + dx + w]
            out[:, k] = (f1 * shifted).sum(axis=1) * inv_c
            k += 1
    return out


def correlation_backward(f1, f2, max_disp, grad_out):
    n, c, h, w = f1.shape
    gf1 = np.zeros_like(f1)
    gf2p = np.zeros((n, c, h + 2 * max_disp, w + 2 * max_disp), dtype=f1.dtype)
    f2p = np.zeros_like(gf2p)
    f2p[:, :, max_disp:max_disp + h, max_disp:max_disp + w] = f2
    k = 0
    inv_c = f1.dtype.type(1.0 / c)
    for dy in range(-max_disp, max_disp + 1):
        for dx in range(-max_disp, max_disp + 1):
            sy = slice(max_disp + dy, max_disp + dy + h)
            sx = slice(max_disp + dx, max_disp + dx + w)
            g = grad_out[:, k:k + 1] * inv_c
            gf1 += g * f2p[:, :, sy, sx]
            gf2p[:, :, sy, sx] += g * f1
            k += 1
    gf2 = gf2p[:, :, max_disp:max_disp + h, max_disp:max_disp + w]
    return gf1, np.ascontiguousarray(gf2)


def _census_offsets(window):
    r = window // 2
    return [(dy, dx)
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)
            if not (dy == 0 and dx == 0)]


def census_forward(gray, window):
    """Soft census descriptor of a single-channel image.

    Channel k holds t / sqrt(0.81 + t^2) with t = neighbor - center for the
    k-th window offset; out-of-frame neighbors yield exactly 0.
    """
    n, _, h, w = gray.shape
    offsets = _census_offsets(window)
    out = np.zeros((n, len(offsets), h, w), dtype=gray.dtype)
    g = gray[:, 0]
    for k, (dy, dx) in enumerate(offsets):
        y_lo, y_hi = max(0, -dy), min(h, h - dy)
        x_lo, x_hi = max(0, -dx), min(w, w - dx)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        center = g[:, y_lo:y_hi, x_lo:x_hi]
        neigh = g[:, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx]
        t = neigh - center
        out[:, k, y_lo:y_hi, x_lo:x_hi] = t / np.sqrt(gray.dtype.type(0.81) + t * t)
    return out


def census_backward(gray, window, grad_out):
    n, _, h, w = gray.shape
    offsets = _census_offsets(window)
    ggray = np.zeros_like(gray)
    g = gray[:, 0]
    gg = ggray[:, 0]
    for k, (dy, dx) in enumerate(offsets):
        y_lo, y_hi = max(0, -dy), min(h, h - dy)
        x_lo, x_hi = max(0, -dx), min(w, w - dx)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        center = g[:, y_lo:y_hi, x_lo:x_hi]
        neigh = g[:, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx]
        t = neigh - center
        # d/dt [t (0.81+t^2)^-1/2] = 0.81 (0.81+t^2)^-3/2
        base = gray.dtype.type(0.81) + t * t
        d = grad_out[:, k, y_lo:y_hi, x_lo:x_hi] * gray.dtype.type(0.81) / (base * np.sqrt(base))
        gg[:, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx] += d
        gg[:, y_lo:y_hi, x_lo:x_hi] -= d
    return ggray
