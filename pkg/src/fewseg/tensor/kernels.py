"""Raw array kernels behind the differentiable ops.

Two implementations live here for the memory-bound kernels (depthwise 4D
convolution, group norm): a numba-JITed fused loop used in production and a
vectorized numpy reference. The numpy path is selected when numba is missing
or FEWSEG_PURE_NUMPY=1 is set, and the test suite asserts both paths agree.

Convolutions with channel mixing (center-pivot paths, 2D convs) are expressed
as tap-gathered GEMMs so the heavy lifting stays inside BLAS; on the 30x30
grid a single training step is dominated by these matmuls, so column caches
are returned to the caller for reuse in the backward pass.
"""

from __future__ import annotations

import math
import os

import numpy as np

USE_NUMBA = False
if not os.environ.get("FEWSEG_PURE_NUMPY"):
    try:
        from numba import njit

        USE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


# ---------------------------------------------------------------------------
# depthwise center-pivot 4D convolution (per-channel, stride 1, padding 1)
# ---------------------------------------------------------------------------

if USE_NUMBA:

    # The tile-local accumulator lets LLVM prove no aliasing against the input
    # and vectorize the 225-wide inner loops; tiles live in L1.

    @njit(cache=True, fastmath=True)
    def _dw4d_fwd_nb(x, wq, ws, out):
        c, h, w, hs, wsz = x.shape
        n = hs * wsz
        x3 = x.reshape(c, h, w, n)
        o3 = out.reshape(c, h, w, n)
        tile = np.empty(n, dtype=x.dtype)
        pad = np.zeros((hs + 2, wsz + 2), dtype=x.dtype)
        for ci in range(c):
            for y in range(h):
                for xx in range(w):
                    for k in range(n):
                        tile[k] = 0.0
                    for u in range(3):
                        yy = y + u - 1
                        if yy < 0 or yy >= h:
                            continue
                        for v in range(3):
                            xv = xx + v - 1
                            if xv < 0 or xv >= w:
                                continue
                            coef = wq[ci, u, v]
                            src = x3[ci, yy, xv]
                            for k in range(n):
                                tile[k] += coef * src[k]
                    own = x[ci, y, xx]
                    for a in range(hs):
                        for b in range(wsz):
                            pad[a + 1, b + 1] = own[a, b]
                    for a in range(hs):
                        for b in range(wsz):
                            s = (ws[ci, 0, 0] * pad[a, b] + ws[ci, 0, 1] * pad[a, b + 1]
                                 + ws[ci, 0, 2] * pad[a, b + 2]
                                 + ws[ci, 1, 0] * pad[a + 1, b] + ws[ci, 1, 1] * pad[a + 1, b + 1]
                                 + ws[ci, 1, 2] * pad[a + 1, b + 2]
                                 + ws[ci, 2, 0] * pad[a + 2, b] + ws[ci, 2, 1] * pad[a + 2, b + 1]
                                 + ws[ci, 2, 2] * pad[a + 2, b + 2])
                            tile[a * wsz + b] += s
                    for k in range(n):
                        o3[ci, y, xx, k] = tile[k]

    @njit(cache=True, fastmath=True)
    def _dw4d_bwd_dw_nb(x, g, dwq, dws):
        c, h, w, hs, wsz = x.shape
        n = hs * wsz
        x3 = x.reshape(c, h, w, n)
        g3 = g.reshape(c, h, w, n)
        pad = np.zeros((hs + 2, wsz + 2), dtype=x.dtype)
        qacc = np.zeros((3, 3), dtype=np.float64)
        sacc = np.zeros((3, 3), dtype=np.float64)
        for ci in range(c):
            for u in range(3):
                for v in range(3):
                    qacc[u, v] = 0.0
                    sacc[u, v] = 0.0
            for y in range(h):
                for xx in range(w):
                    gt = g3[ci, y, xx]
                    for u in range(3):
                        yy = y + u - 1
                        if yy < 0 or yy >= h:
                            continue
                        for v in range(3):
                            xv = xx + v - 1
                            if xv < 0 or xv >= w:
                                continue
                            src = x3[ci, yy, xv]
                            s = 0.0
                            for k in range(n):
                                s += gt[k] * src[k]
                            qacc[u, v] += s
                    own = x[ci, y, xx]
                    for a in range(hs):
                        for b in range(wsz):
                            pad[a + 1, b + 1] = own[a, b]
                    for p in range(3):
                        for q in range(3):
                            s = 0.0
                            for a in range(hs):
                                for b in range(wsz):
                                    s += gt[a * wsz + b] * pad[a + p, b + q]
                            sacc[p, q] += s
            for u in range(3):
                for v in range(3):
                    dwq[ci, u, v] += qacc[u, v]
                    dws[ci, u, v] += sacc[u, v]


def _dw4d_fwd_np(x, wq, ws, out):
    c, h, w, hs, wsz = x.shape
    shape_c = (c, 1, 1, 1, 1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0), (0, 0)))
    for u in range(3):
        for v in range(3):
            out += wq[:, u, v].reshape(shape_c) * xp[:, u : u + h, v : v + w]
    xps = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    for p in range(3):
        for q in range(3):
            out += ws[:, p, q].reshape(shape_c) * xps[:, :, :, p : p + hs, q : q + wsz]


def _dw4d_bwd_dw_np(x, g, dwq, dws):
    c, h, w, hs, wsz = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0), (0, 0)))
    for u in range(3):
        for v in range(3):
            dwq[:, u, v] += np.einsum("cijab,cijab->c", g, xp[:, u : u + h, v : v + w])
    xps = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    for p in range(3):
        for q in range(3):
            dws[:, p, q] += np.einsum("cijab,cijab->c", g, xps[:, :, :, p : p + hs, q : q + wsz])


def dw4d_forward(x, wq, ws):
    if USE_NUMBA:
        out = np.empty_like(x)
        _dw4d_fwd_nb(x, wq, ws, out)
    else:
        out = np.zeros_like(x)
        _dw4d_fwd_np(x, wq, ws, out)
    return out


def dw4d_backward_dx(g, wq, ws):
    # Correlation transpose: convolve the upstream grad with flipped taps.
    if USE_NUMBA:
        dx = np.empty_like(g)
        _dw4d_fwd_nb(g, np.ascontiguousarray(wq[:, ::-1, ::-1]), np.ascontiguousarray(ws[:, ::-1, ::-1]), dx)
        return dx
    dx = np.zeros_like(g)
    _dw4d_fwd_np(g, wq[:, ::-1, ::-1], ws[:, ::-1, ::-1], dx)
    return dx


def dw4d_backward_dw(x, g):
    dwq = np.zeros((x.shape[0], 3, 3), dtype=x.dtype)
    dws = np.zeros((x.shape[0], 3, 3), dtype=x.dtype)
    if USE_NUMBA:
        _dw4d_bwd_dw_nb(x, g, dwq, dws)
    else:
        _dw4d_bwd_dw_np(x, g, dwq, dws)
    return dwq, dws


# ---------------------------------------------------------------------------
# group normalization over (channels-in-group x all spatial positions)
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _gn_fwd_nb(x, gamma, beta, groups, eps, out, xhat, inv_std, fuse_relu):
        c, s = x.shape
        gs = c // groups
        n = gs * s
        for g in range(groups):
            acc = 0.0
            acc2 = 0.0
            for cc in range(g * gs, (g + 1) * gs):
                for j in range(s):
                    v = x[cc, j]
                    acc += v
                    acc2 += v * v
            mean = acc / n
            var = acc2 / n - mean * mean
            if var < 0.0:
                var = 0.0
            inv = 1.0 / math.sqrt(var + eps)
            inv_std[g] = inv
            for cc in range(g * gs, (g + 1) * gs):
                ga = gamma[cc]
                be = beta[cc]
                if fuse_relu:
                    for j in range(s):
                        xh = (x[cc, j] - mean) * inv
                        xhat[cc, j] = xh
                        o = ga * xh + be
                        out[cc, j] = o if o > 0.0 else 0.0
                else:
                    for j in range(s):
                        xh = (x[cc, j] - mean) * inv
                        xhat[cc, j] = xh
                        out[cc, j] = ga * xh + be

    @njit(cache=True, fastmath=True)
    def _gn_bwd_nb(g, out, xhat, inv_std, gamma, groups, dx, dgamma, dbeta, fused_relu):
        c, s = g.shape
        gs = c // groups
        n = gs * s
        for gi in range(groups):
            m1 = 0.0
            m2 = 0.0
            for cc in range(gi * gs, (gi + 1) * gs):
                ga = gamma[cc]
                sg = 0.0
                sgx = 0.0
                for j in range(s):
                    gv = g[cc, j]
                    if fused_relu and out[cc, j] <= 0.0:
                        gv = 0.0
                    sg += gv
                    sgx += gv * xhat[cc, j]
                dgamma[cc] += sgx
                dbeta[cc] += sg
                m1 += ga * sg
                m2 += ga * sgx
            m1 /= n
            m2 /= n
            inv = inv_std[gi]
            for cc in range(gi * gs, (gi + 1) * gs):
                ga = gamma[cc]
                if fused_relu:
                    for j in range(s):
                        gv = g[cc, j] if out[cc, j] > 0.0 else 0.0
                        dx[cc, j] = inv * (ga * gv - m1 - xhat[cc, j] * m2)
                else:
                    for j in range(s):
                        dx[cc, j] = inv * (ga * g[cc, j] - m1 - xhat[cc, j] * m2)


def _gn_fwd_np(x, gamma, beta, groups, eps, out, xhat, inv_std, fuse_relu):
    c, s = x.shape
    xg = x.reshape(groups, -1)
    mean = xg.mean(axis=1, dtype=np.float64)
    var = xg.var(axis=1, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    inv_std[...] = inv
    xhat[...] = ((xg - mean[:, None]) * inv[:, None]).reshape(c, s).astype(x.dtype)
    out[...] = xhat * gamma[:, None] + beta[:, None]
    if fuse_relu:
        np.maximum(out, 0.0, out=out)


def _gn_bwd_np(g, out, xhat, inv_std, gamma, groups, dx, dgamma, dbeta, fused_relu):
    c, s = g.shape
    if fused_relu:
        g = g * (out > 0)
    dgamma += np.einsum("cs,cs->c", g, xhat)
    dbeta += g.sum(axis=1)
    ggam = g * gamma[:, None]
    gg = ggam.reshape(groups, -1)
    xh = xhat.reshape(groups, -1)
    m1 = gg.mean(axis=1)
    m2 = (gg * xh).mean(axis=1)
    dx[...] = ((gg - m1[:, None] - xh * m2[:, None]) * inv_std[:, None]).reshape(c, s)


def group_norm_forward(x2, gamma, beta, groups, eps, fuse_relu=False):
    """x2 is (channels, flattened spatial); returns (out, xhat, inv_std)."""
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv_std = np.empty(groups, dtype=np.float64)
    if USE_NUMBA:
        _gn_fwd_nb(x2, gamma, beta, groups, eps, out, xhat, inv_std, fuse_relu)
    else:
        _gn_fwd_np(x2, gamma, beta, groups, eps, out, xhat, inv_std, fuse_relu)
    return out, xhat, inv_std


def group_norm_backward(g2, out2, xhat, inv_std, gamma, groups, fused_relu=False):
    dx = np.empty_like(g2)
    dgamma = np.zeros_like(gamma)
    dbeta = np.zeros_like(gamma)
    if USE_NUMBA:
        _gn_bwd_nb(g2, out2, xhat, inv_std, gamma, groups, dx, dgamma, dbeta, fused_relu)
    else:
        _gn_bwd_np(g2, out2, xhat, inv_std, gamma, groups, dx, dgamma, dbeta, fused_relu)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# tap-gathered GEMM convolutions
# ---------------------------------------------------------------------------


def conv_query_forward(x, w, bias):
    """Convolve over axes (1, 2) of x = (ci, H, W, *rest), stride 1, same pad.

    Returns (out, cols); cols is the (ci, kh*kw, M) gather cache the backward
    pass reuses for the weight gradient.
    """
    ci, h, ww = x.shape[:3]
    rest = x.shape[3:]
    co, ci_w, kh, kw = w.shape
    m = h * ww * int(np.prod(rest, dtype=np.int64)) if rest else h * ww
    ph, pw = kh // 2, kw // 2
    if ph or pw:
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)) + ((0, 0),) * len(rest))
    else:
        xp = x
    cols = np.empty((ci, kh * kw, m), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u * kw + v, :] = xp[:, u : u + h, v : v + ww].reshape(ci, m)
    out2 = w.reshape(co, ci * kh * kw) @ cols.reshape(ci * kh * kw, m)
    if bias is not None:
        out2 += bias[:, None]
    return out2.reshape((co, h, ww) + rest), cols


def conv_query_backward_dx(g, w, x_shape):
    ci = x_shape[0]
    h, ww = x_shape[1], x_shape[2]
    rest = x_shape[3:]
    co, _, kh, kw = w.shape
    m = g.size // co
    ph, pw = kh // 2, kw // 2
    dcols = w.reshape(co, ci * kh * kw).T @ g.reshape(co, m)
    dcols = dcols.reshape(ci, kh * kw, m)
    dxp = np.zeros((ci, h + 2 * ph, ww + 2 * pw) + rest, dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u : u + h, v : v + ww] += dcols[:, u * kw + v, :].reshape((ci, h, ww) + rest)
    if ph or pw:
        return np.ascontiguousarray(dxp[:, ph : ph + h, pw : pw + ww])
    return dxp


def conv_tap_backward_dw(g, cols, w_shape):
    co, ci, kh, kw = w_shape
    m = g.size // co
    dw2 = g.reshape(co, m) @ cols.reshape(ci * kh * kw, m).T
    return dw2.reshape(w_shape)


def conv_support_forward(x, w, stride):
    """3x3 convolution over the trailing support dims of x = (ci, h, w, hs, ws),
    zero padding 1, stride applied to the support dims only."""
    ci, h, ww, hs, wsz = x.shape
    co = w.shape[0]
    hs2 = (hs - 1) // stride + 1
    ws2 = (wsz - 1) // stride + 1
    m = h * ww * hs2 * ws2
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((ci, 9, m), dtype=x.dtype)
    for p in range(3):
        for q in range(3):
            sl = xp[:, :, :, p : p + stride * (hs2 - 1) + 1 : stride, q : q + stride * (ws2 - 1) + 1 : stride]
            cols[:, p * 3 + q, :] = sl.reshape(ci, m)
    out2 = w.reshape(co, ci * 9) @ cols.reshape(ci * 9, m)
    return out2.reshape(co, h, ww, hs2, ws2), cols


def conv_support_backward_dx(g, w, x_shape, stride):
    ci, h, ww, hs, wsz = x_shape
    co = w.shape[0]
    hs2, ws2 = g.shape[3], g.shape[4]
    m = g.size // co
    dcols = w.reshape(co, ci * 9).T @ g.reshape(co, m)
    dcols = dcols.reshape(ci, 9, m)
    dxp = np.zeros((ci, h, ww, hs + 2, wsz + 2), dtype=g.dtype)
    for p in range(3):
        for q in range(3):
            dxp[:, :, :, p : p + stride * (hs2 - 1) + 1 : stride, q : q + stride * (ws2 - 1) + 1 : stride] += dcols[
                :, p * 3 + q, :
            ].reshape(ci, h, ww, hs2, ws2)
    return np.ascontiguousarray(dxp[:, :, :, 1 : 1 + hs, 1 : 1 + wsz])


# ---------------------------------------------------------------------------
# bilinear resize (align_corners=False), separable lerp form
# ---------------------------------------------------------------------------


def resize_axis_params(n_in, n_out, dtype):
    """Source index pairs (i0, i1) and lerp weights t: out = x[i0] + t * (x[i1] - x[i0])."""
    if n_in == 1:
        zero = np.zeros(n_out, dtype=np.int64)
        return zero, zero, np.zeros(n_out, dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    t = (src - i0).astype(dtype)
    return i0, i0 + 1, t


def bilinear_resize_forward(x, out_h, out_w):
    """Resize the last two axes of x; exact on constants by construction."""
    h, w = x.shape[-2], x.shape[-1]
    y0, y1, ty = resize_axis_params(h, out_h, x.dtype)
    a = x[..., y0, :]
    xh = a + ty[:, None] * (x[..., y1, :] - a)
    z0, z1, tz = resize_axis_params(w, out_w, x.dtype)
    c0 = xh[..., z0]
    return c0 + tz * (xh[..., z1] - c0)


def bilinear_resize_backward(g, in_h, in_w):
    out_h, out_w = g.shape[-2], g.shape[-1]
    y0, y1, ty = resize_axis_params(in_h, out_h, g.dtype)
    z0, z1, tz = resize_axis_params(in_w, out_w, g.dtype)
    dxh = np.zeros(g.shape[:-1] + (in_w,), dtype=g.dtype)
    np.add.at(dxh, (..., z0), g * (1.0 - tz))
    np.add.at(dxh, (..., z1), g * tz)
    dx = np.zeros(g.shape[:-2] + (in_h, in_w), dtype=g.dtype)
    np.add.at(dx, (..., y0, slice(None)), dxh * (1.0 - ty)[:, None])
    np.add.at(dx, (..., y1, slice(None)), dxh * ty[:, None])
    return dx
