"""3D convolution, transposed convolution and batch normalization.

Layout is channels-first, ``[N, C, H, W, D]``, row-major with the last axis
fastest. Convolutions go through an im2col buffer that is built one slab of
output rows at a time, so peak memory stays bounded on full-size volumes.
The backward pass rebuilds the columns per slab instead of caching them.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _result

__all__ = [
    "conv3d",
    "conv_transpose3d",
    "batchnorm",
    "conv_output_size",
    "same_padding",
    "im2col",
    "col2im",
    "BatchNormState",
]

# elements per im2col slab (16 MB in float32, cache friendly)
_SLAB_ELEMENTS = 1 << 22


def conv_output_size(n: int, k: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def same_padding(k: int, dilation: int = 1) -> int:
    """Padding that keeps the extent unchanged at stride 1 (odd kernels)."""
    return dilation * (k - 1) // 2


def im2col(x: np.ndarray, k: int, stride: int, dilation: int, out_shape: tuple) -> np.ndarray:
    """Strided view ``[N, H', W', D', C, k, k, k]`` over a padded input ``[N, C, H, W, D]``."""
    n, c = x.shape[:2]
    sn, sc, sh, sw, sd = x.strides
    return as_strided(
        x,
        shape=(n, *out_shape, c, k, k, k),
        strides=(sn, sh * stride, sw * stride, sd * stride, sc,
                 sh * dilation, sw * dilation, sd * dilation),
        writeable=False,
    )


def col2im(cols: np.ndarray, out: np.ndarray, stride: int, dilation: int) -> None:
    """Scatter-add ``cols [N, H', W', D', C, k, k, k]`` into ``out [N, C, H, W, D]``."""
    oh, ow, od = cols.shape[1:4]
    k = cols.shape[-1]
    for a in range(k):
        ha = a * dilation
        for b in range(k):
            wb = b * dilation
            for e in range(k):
                de = e * dilation
                out[:, :,
                    ha:ha + stride * (oh - 1) + 1:stride,
                    wb:wb + stride * (ow - 1) + 1:stride,
                    de:de + stride * (od - 1) + 1:stride] += np.moveaxis(cols[..., a, b, e], 4, 1)


def _slabs(n_rows: int, row_elements: int):
    step = max(1, _SLAB_ELEMENTS // max(row_elements, 1))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def _windows_last(xl: np.ndarray, k: int, stride: int, dilation: int, out_shape: tuple) -> np.ndarray:
    """Strided view ``[N, H', W', D', k, k, k, C]`` over a channels-last input.

    Keeping channels innermost makes the column copy contiguous per tap.
    """
    sn, sh, sw, sd, sc = xl.strides
    return as_strided(
        xl,
        shape=(xl.shape[0], *out_shape, k, k, k, xl.shape[4]),
        strides=(sn, sh * stride, sw * stride, sd * stride,
                 sh * dilation, sw * dilation, sd * dilation, sc),
        writeable=False,
    )


def _correlate(xp: np.ndarray, wmat: np.ndarray, k: int, stride: int, dilation: int,
               out_shape: tuple) -> np.ndarray:
    """Unbiased conv forward on an already padded ``xp``.

    ``wmat`` is ``[Cout, k^3*Cin]`` with the input channel fastest.
    """
    n, cin = xp.shape[:2]
    cout = wmat.shape[0]
    xl = np.ascontiguousarray(np.moveaxis(xp, 1, 4))
    out = np.empty((n, *out_shape, cout), dtype=np.result_type(xp.dtype, wmat.dtype))
    row = n * out_shape[1] * out_shape[2] * cin * k ** 3
    for h0, h1 in _slabs(out_shape[0], row):
        cols = _windows_last(xl[:, h0 * stride:], k, stride, dilation, (h1 - h0, *out_shape[1:]))
        res = cols.reshape(-1, cin * k ** 3) @ wmat.T
        out[:, h0:h1] = res.reshape(n, h1 - h0, *out_shape[1:], cout)
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def _last_major(w: np.ndarray) -> np.ndarray:
    """``[Cout, Cin, k, k, k]`` -> ``[Cout, k^3*Cin]`` with the input channel fastest."""
    return np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(w.shape[0], -1)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Direct 3D cross-correlation with symmetric zero padding.

    ``x`` is ``[N, Cin, H, W, D]``, ``weight`` is ``[Cout, Cin, k, k, k]``.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k < 1:
        raise ValueError(f"conv3d expects a cubic kernel, got {weight.shape}")
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    out_shape = tuple(conv_output_size(s, k, stride, dilation, padding) for s in x.shape[2:])
    if min(out_shape) < 1:
        raise ValueError(f"conv3d output extent would be {out_shape} for input {x.shape}")

    n = x.shape[0]
    xp = _pad(x.data, padding)
    wmat = _last_major(weight.data)
    row = n * out_shape[1] * out_shape[2] * cin * k ** 3
    out = _correlate(xp, wmat, k, stride, dilation, out_shape)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)
    # stride-1 input gradient is a full correlation with the flipped kernel
    flip_pad = dilation * (k - 1) - padding
    direct_gx = stride == 1 and flip_pad >= 0

    def backward(g):
        g_last = np.moveaxis(g, 1, 4)
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad and not direct_gx else None
        gx = None
        if x.requires_grad and direct_gx:
            wflip = _last_major(weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _correlate(_pad(g, flip_pad), wflip, k, 1, dilation, x.shape[2:])
        xl = np.ascontiguousarray(np.moveaxis(xp, 1, 4)) if gw is not None else None
        for h0, h1 in _slabs(out_shape[0], row):
            if gw is None and gxp is None:
                break
            gs = g_last[:, h0:h1].reshape(-1, cout)
            sub_shape = (h1 - h0, *out_shape[1:])
            if gw is not None:
                cols = _windows_last(xl[:, h0 * stride:], k, stride, dilation, sub_shape)
                gw += gs.T @ cols.reshape(-1, cin * k ** 3)
            if gxp is not None:
                gcols = (gs @ wmat).reshape(n, *sub_shape, k, k, k, cin)
                col2im(gcols.transpose(0, 1, 2, 3, 7, 4, 5, 6), gxp[:, :, h0 * stride:],
                       stride, dilation)
        if gxp is not None:
            p = padding
            gx = gxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p, p:xp.shape[4] - p]
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        if gw is not None:
            gw = gw.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d")


def conv_transpose3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 2,
) -> Tensor:
    """Transposed 3D convolution (the adjoint of an unpadded, undilated conv3d).

    ``weight`` is ``[Cin, Cout, k, k, k]``; the output extent is ``(n - 1) * stride + k``,
    which is ``n * stride`` for the ``k == stride`` case used by the decoder.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv_transpose3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    cin, cout, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ValueError(f"conv_transpose3d expects a cubic kernel, got {weight.shape}")
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {cin}")
    if stride < 1 or k < stride:
        raise ValueError(f"conv_transpose3d needs 1 <= stride <= k, got stride={stride}, k={k}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")

    n = x.shape[0]
    in_shape = x.shape[2:]
    out_shape = tuple((s - 1) * stride + k for s in in_shape)
    wmat = weight.data.reshape(cin, -1)
    x_last = np.moveaxis(x.data, 1, 4)
    out = np.zeros((n, cout, *out_shape), dtype=np.result_type(x.dtype, weight.dtype))
    row = n * in_shape[1] * in_shape[2] * cout * k ** 3
    for h0, h1 in _slabs(in_shape[0], row):
        cols = (x_last[:, h0:h1].reshape(-1, cin) @ wmat).reshape(
            n, h1 - h0, *in_shape[1:], cout, k, k, k)
        col2im(cols, out[:, :, h0 * stride:], stride, 1)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gx = np.empty_like(x_last) if x.requires_grad else None
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        for h0, h1 in _slabs(in_shape[0], row):
            cols = im2col(g[:, :, h0 * stride:], k, stride, 1, (h1 - h0, *in_shape[1:]))
            cols = cols.reshape(-1, cout * k ** 3)
            if gx is not None:
                gx[:, h0:h1] = (cols @ wmat.T).reshape(n, h1 - h0, *in_shape[1:], cin)
            if gw is not None:
                gw += x_last[:, h0:h1].reshape(-1, cin).T @ cols
        if gx is not None:
            gx = np.ascontiguousarray(np.moveaxis(gx, 4, 1))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        if gw is not None:
            gw = gw.reshape(weight.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv_transpose3d")


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over every non-channel axis.

    In training mode batch statistics are used and ``state`` is updated in
    place (unbiased variance for the running estimate); in eval mode the
    running statistics are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    g_ = gamma.data.reshape(bshape)

    if training:
        if m <= 1:
            raise ValueError("batchnorm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        state.mean[...] = (1 - momentum) * state.mean + momentum * mu
        state.var[...] = (1 - momentum) * state.var + momentum * var * m / (m - 1)
    else:
        inv = (1.0 / np.sqrt(state.var + eps)).astype(x.dtype)
        xhat = (x.data - state.mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm")
