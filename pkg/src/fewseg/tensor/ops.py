"""Differentiable operations over Tensor nodes.

Each op validates shapes, computes its forward value through the raw kernels,
and (only when some input requires grad) attaches a closure that pushes exact
analytic gradients into its parents. The op set is exactly what the decoder
needs; this is not a general-purpose autodiff library.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from . import kernels
from .core import Tensor, make_op_output


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes in op: {dt} vs {t.dtype}")
    return dt


def relu(x: Tensor) -> Tensor:
    out = make_op_output(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        out_data = out.data

        def _bw():
            x.accumulate_grad(out.grad * (out_data > 0))

        out._backward = _bw
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.dims != y.dims:
        raise ShapeError(f"add: dims {x.dims} vs {y.dims}")
    _check_same_dtype(x, y)
    out = make_op_output(x.data + y.data, (x, y))
    if out.requires_grad:

        def _bw():
            # Two parents may not own the same grad array: later accumulation
            # into one would corrupt the other.
            if x.requires_grad and y.requires_grad:
                x.accumulate_grad(out.grad)
                y.accumulate_grad(out.grad.copy() if y.grad is None else out.grad)
            elif x.requires_grad:
                x.accumulate_grad(out.grad)
            else:
                y.accumulate_grad(out.grad)

        out._backward = _bw
    return out


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 0 (the channel axis of every 2D/4D map here)."""
    base = tensors[0].dims[1:]
    for t in tensors[1:]:
        if t.dims[1:] != base:
            raise ShapeError(f"concat_channels: trailing dims differ: {t.dims} vs {tensors[0].dims}")
    _check_same_dtype(*tensors)
    out = make_op_output(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors))
    if out.requires_grad:
        sizes = [t.dims[0] for t in tensors]

        def _bw():
            ofs = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    t.accumulate_grad(out.grad[ofs : ofs + n])
                ofs += n

        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = make_op_output(np.asarray(x.data.sum(), dtype=x.dtype), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(np.full_like(x.data, out.grad))

        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = make_op_output(np.asarray(x.data.mean(), dtype=x.dtype), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(np.full_like(x.data, out.grad / n))

        out._backward = _bw
    return out


def cosine_similarity_map(query: Tensor, support: Tensor) -> Tensor:
    """Pairwise ReLU-clamped cosine similarity between feature rows.

    out[i, j] = clip(cos(q_i, s_j), 0, 1); rows with zero norm contribute 0
    ("no evidence"), never NaN.
    """
    if query.data.ndim != 2 or support.data.ndim != 2 or query.dims[1] != support.dims[1]:
        raise ShapeError(f"cosine_similarity_map: dims {query.dims} vs {support.dims}")
    _check_same_dtype(query, support)
    q, s = query.data, support.data
    nq = np.sqrt(np.einsum("ic,ic->i", q, q))
    ns = np.sqrt(np.einsum("jc,jc->j", s, s))
    denom = nq[:, None] * ns[None, :]
    valid = denom > 0
    denom_safe = np.where(valid, denom, 1.0).astype(q.dtype)
    cos = np.where(valid, (q @ s.T) / denom_safe, 0.0).astype(q.dtype)
    out = make_op_output(np.clip(cos, 0.0, 1.0), (query, support))
    if out.requires_grad:

        def _bw():
            dcos = out.grad * ((cos > 0) & (cos < 1) & valid)
            dc = dcos / denom_safe
            w = dcos * cos
            if query.requires_grad:
                nq2 = np.where(nq > 0, nq * nq, 1.0)
                dq = dc @ s - q * (w.sum(axis=1) / nq2)[:, None]
                query.accumulate_grad(dq.astype(q.dtype))
            if support.requires_grad:
                ns2 = np.where(ns > 0, ns * ns, 1.0)
                ds = dc.T @ q - s * (w.sum(axis=0) / ns2)[:, None]
                support.accumulate_grad(ds.astype(s.dtype))

        out._backward = _bw
    return out


def _check_conv4d_shapes(x, wq, ws, bias, depthwise):
    if x.data.ndim != 5:
        raise ShapeError(f"4D conv input must be 5-d (c, h, w, hs, ws), got {x.dims}")
    if depthwise:
        want = (x.dims[0], 3, 3)
        if wq.dims != want or ws.dims != want:
            raise ShapeError(f"dw4d kernels must be {want}, got {wq.dims} / {ws.dims}")
    else:
        if wq.dims[2:] != (3, 3) or ws.dims[2:] != (3, 3):
            raise ShapeError("cp4d kernels must be 3x3 on each spatial pair")
        if wq.dims != ws.dims or wq.dims[1] != x.dims[0]:
            raise ShapeError(f"cp4d kernels {wq.dims}/{ws.dims} do not match input channels {x.dims[0]}")
        if bias.dims != (wq.dims[0],):
            raise ShapeError(f"cp4d bias must be ({wq.dims[0]},), got {bias.dims}")


def cp4d_conv(x: Tensor, wq: Tensor, ws: Tensor, bias: Tensor, support_stride: int = 1) -> Tensor:
    """Center-pivot 4D convolution: a query-offset 2D kernel applied on the
    strided support grid plus a support-offset 2D kernel, both pivoted at the
    opposite pair's center, summed (contributions add at the joint center)."""
    if support_stride not in (1, 2):
        raise ConfigError(f"support_stride must be 1 or 2, got {support_stride}")
    _check_conv4d_shapes(x, wq, ws, bias, depthwise=False)
    _check_same_dtype(x, wq, ws, bias)
    pruned = np.ascontiguousarray(x.data[:, :, :, ::support_stride, ::support_stride])
    out_q, cols_q = kernels.conv_query_forward(pruned, wq.data, None)
    out_s, cols_s = kernels.conv_support_forward(x.data, ws.data, support_stride)
    out_q += out_s
    out_q += bias.data.reshape(-1, 1, 1, 1, 1)
    out = make_op_output(out_q, (x, wq, ws, bias))
    if out.requires_grad:
        need_w = wq.requires_grad or ws.requires_grad
        cols = (cols_q, cols_s) if need_w else None
        x_shape, pruned_shape = x.dims, pruned.shape

        def _bw():
            g = out.grad
            if wq.requires_grad:
                wq.accumulate_grad(kernels.conv_tap_backward_dw(g, cols[0], wq.dims))
            if ws.requires_grad:
                ws.accumulate_grad(kernels.conv_tap_backward_dw(g, cols[1], ws.dims))
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(1, 2, 3, 4)))
            if x.requires_grad:
                dx = kernels.conv_support_backward_dx(g, ws.data, x_shape, support_stride)
                dxq = kernels.conv_query_backward_dx(g, wq.data, pruned_shape)
                dx[:, :, :, ::support_stride, ::support_stride] += dxq
                x.accumulate_grad(dx)

        out._backward = _bw
    return out


def dw4d_conv(x: Tensor, wq: Tensor, ws: Tensor) -> Tensor:
    """Depthwise center-pivot 4D convolution: per-channel, stride 1, no bias."""
    _check_conv4d_shapes(x, wq, ws, None, depthwise=True)
    _check_same_dtype(x, wq, ws)
    out = make_op_output(kernels.dw4d_forward(x.data, wq.data, ws.data), (x, wq, ws))
    if out.requires_grad:

        def _bw():
            g = out.grad
            if wq.requires_grad or ws.requires_grad:
                dwq, dws = kernels.dw4d_backward_dw(x.data, g)
                if wq.requires_grad:
                    wq.accumulate_grad(dwq)
                if ws.requires_grad:
                    ws.accumulate_grad(dws)
            if x.requires_grad:
                x.accumulate_grad(kernels.dw4d_backward_dx(g, wq.data, ws.data))

        out._backward = _bw
    return out


def pw4d_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise 4D convolution: pure channel mixing at every 4D position."""
    if weight.data.ndim != 2 or weight.dims[1] != x.dims[0]:
        raise ShapeError(f"pw4d weight {weight.dims} does not match input channels {x.dims[0]}")
    if bias.dims != (weight.dims[0],):
        raise ShapeError(f"pw4d bias must be ({weight.dims[0]},), got {bias.dims}")
    _check_same_dtype(x, weight, bias)
    ci = x.dims[0]
    co = weight.dims[0]
    rest = x.dims[1:]
    x2 = x.data.reshape(ci, -1)
    out2 = weight.data @ x2
    out2 += bias.data[:, None]
    out = make_op_output(out2.reshape((co,) + rest), (x, weight, bias))
    if out.requires_grad:

        def _bw():
            g2 = out.grad.reshape(co, -1)
            if weight.requires_grad:
                weight.accumulate_grad(g2 @ x2.T)
            if bias.requires_grad:
                bias.accumulate_grad(g2.sum(axis=1))
            if x.requires_grad:
                x.accumulate_grad((weight.data.T @ g2).reshape(x.dims))

        out._backward = _bw
    return out


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               fuse_relu: bool = False) -> Tensor:
    """Per-group normalization over (channels-in-group x spatial), then affine.

    fuse_relu=True applies ReLU inside the same kernel pass (used on the hot
    path where GN is always followed by an activation); gradients match the
    composed relu(group_norm(x)) exactly.
    """
    c = x.dims[0]
    if c % groups != 0:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    if gamma.dims != (c,) or beta.dims != (c,):
        raise ShapeError(f"group_norm affine params must be ({c},)")
    _check_same_dtype(x, gamma, beta)
    x2 = np.ascontiguousarray(x.data.reshape(c, -1))
    out2, xhat, inv_std = kernels.group_norm_forward(x2, gamma.data, beta.data, groups, eps,
                                                     fuse_relu=fuse_relu)
    out = make_op_output(out2.reshape(x.dims), (x, gamma, beta))
    if out.requires_grad:

        def _bw():
            g2 = np.ascontiguousarray(out.grad.reshape(c, -1))
            dx2, dgamma, dbeta = kernels.group_norm_backward(g2, out2, xhat, inv_std,
                                                             gamma.data, groups,
                                                             fused_relu=fuse_relu)
            if gamma.requires_grad:
                gamma.accumulate_grad(dgamma)
            if beta.requires_grad:
                beta.accumulate_grad(dbeta)
            if x.requires_grad:
                x.accumulate_grad(dx2.reshape(x.dims))

        out._backward = _bw
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 2D convolution with a 3x3 or 1x1 kernel."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (c, H, W), got {x.dims}")
    co, ci, kh, kw = w.dims
    if kh != kw or kh not in (1, 3):
        raise ConfigError(f"conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if ci != x.dims[0]:
        raise ShapeError(f"conv2d weight {w.dims} does not match input channels {x.dims[0]}")
    if bias.dims != (co,):
        raise ShapeError(f"conv2d bias must be ({co},), got {bias.dims}")
    _check_same_dtype(x, w, bias)
    out_data, cols = kernels.conv_query_forward(np.ascontiguousarray(x.data), w.data, bias.data)
    out = make_op_output(out_data, (x, w, bias))
    if out.requires_grad:
        cols_kept = cols if w.requires_grad else None
        x_shape = x.dims

        def _bw():
            g = out.grad
            if w.requires_grad:
                w.accumulate_grad(kernels.conv_tap_backward_dw(g, cols_kept, w.dims))
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(1, 2)))
            if x.requires_grad:
                x.accumulate_grad(kernels.conv_query_backward_dx(g, w.data, x_shape))

        out._backward = _bw
    return out


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the trailing two axes, align_corners=False."""
    if x.data.ndim < 2:
        raise ShapeError(f"bilinear_resize input must have >= 2 dims, got {x.dims}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_resize target must be positive, got {(out_h, out_w)}")
    in_h, in_w = x.dims[-2], x.dims[-1]
    out = make_op_output(kernels.bilinear_resize_forward(x.data, out_h, out_w), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(kernels.bilinear_resize_backward(out.grad, in_h, in_w))

        out._backward = _bw
    return out


def avg_over_support_dims(x: Tensor) -> Tensor:
    """Arithmetic mean over the trailing two (support) dims."""
    if x.data.ndim < 3:
        raise ShapeError(f"avg_over_support_dims input must have >= 3 dims, got {x.dims}")
    n = x.dims[-2] * x.dims[-1]
    out = make_op_output(np.ascontiguousarray(x.data.mean(axis=(-2, -1))), (x,))
    if out.requires_grad:

        def _bw():
            dx = np.empty(x.dims, dtype=x.dtype)
            dx[...] = (out.grad / n)[..., None, None]
            x.accumulate_grad(dx)

        out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean 2-class cross-entropy over pixels; target is a binary (H, W) array."""
    if logits.data.ndim != 3 or logits.dims[0] != 2:
        raise ShapeError(f"logits must be (2, H, W), got {logits.dims}")
    target = np.asarray(target)
    if target.shape != logits.dims[1:]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.dims[1:]}")
    if not np.isin(target, (0, 1)).all():
        raise DataError("cross-entropy target must be binary {0, 1}")
    z = logits.data
    m = z.max(axis=0)
    ez = np.exp(z - m)
    sez = ez.sum(axis=0)
    lse = m + np.log(sez)
    fg = target == 1
    picked = np.where(fg, z[1], z[0])
    n_px = target.size
    loss = np.asarray((lse - picked).sum() / n_px, dtype=z.dtype)
    out = make_op_output(loss, (logits,))
    if out.requires_grad:

        def _bw():
            p = ez / sez
            p[0] -= ~fg
            p[1] -= fg
            logits.accumulate_grad(p * (out.grad / n_px))

        out._backward = _bw
    return out
