"""Vector capsules: squash, convolutional votes, routing-by-agreement.

A capsule grid is a tensor laid out ``[N, H, W, D, C, A]``: a spatial grid of
``C`` capsule types, each an ``A``-dimensional vector whose length encodes
presence.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from . import tensor as T
from .conv import conv_output_size
from .tensor import Tensor, _result

__all__ = [
    "squash",
    "compute_votes",
    "dynamic_routing",
    "routing_fused",
    "capsule_conv3d",
    "margin_loss",
]

SQUASH_EPS = 1e-7


def _squash_forward(x: np.ndarray, eps: float):
    n2 = (x * x).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    denom = (1 + n2) * (n + eps)
    gain = n2 / denom
    return gain * x, (n2, n, denom, gain)


def _squash_backward(x: np.ndarray, cache, eps: float, g: np.ndarray) -> np.ndarray:
    n2, n, denom, gain = cache
    # d gain / d n, divided by n; finite at n == 0
    dgain_n = 2 / denom - 2 * n2 / ((1 + n2) * denom) - n / (denom * (n + eps))
    return gain * g + dgain_n * x * (x * g).sum(axis=-1, keepdims=True)


def squash(s: Tensor, eps: float = SQUASH_EPS) -> Tensor:
    """Shrink each vector along the last axis into the open unit ball.

    ``|s|^2 / (1 + |s|^2) * s / (|s| + eps)``; the zero vector maps to itself.
    """
    if eps <= 0:
        raise ValueError("squash eps must be positive")
    out, cache = _squash_forward(s.data, eps)
    return _result(out, (s,), lambda g: (_squash_backward(s.data, cache, eps, g),), "squash")


def compute_votes(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Map every lower capsule in each k^3 window into every upper capsule type.

    ``x`` is a capsule grid ``[N, H, W, D, Cin, Ain]`` and ``weight`` holds one
    ``Aout x Ain`` transform per (input type, kernel offset, output type):
    ``[Cin, k, k, k, Cout, Aout, Ain]``. Transforms are shared across space.

    Returns votes ``[N, H', W', D', Cin*k^3, Cout, Aout]`` where the lower
    capsule index enumerates input type first, then kernel offset.
    """
    return _votes(x, weight, stride, padding, lower_last=False)


def _votes(x: Tensor, weight: Tensor, stride: int, padding: int, lower_last: bool) -> Tensor:
    """Vote computation; ``lower_last`` lays votes out ``[..., Cout, Aout, Cin*k^3]``."""
    if x.ndim != 6:
        raise ValueError(f"capsule grid must be [N,H,W,D,C,A], got shape {x.shape}")
    if weight.ndim != 7:
        raise ValueError(f"vote weights must be [Cin,k,k,k,Cout,Aout,Ain], got {weight.shape}")
    cin, k = weight.shape[0], weight.shape[1]
    cout, aout, ain = weight.shape[4:]
    if weight.shape[1:4] != (k, k, k):
        raise ValueError(f"vote weights need a cubic kernel, got {weight.shape}")
    if x.shape[4:] != (cin, ain):
        raise ValueError(f"grid capsules {x.shape[4:]} do not match weights ({cin}, {ain})")
    n = x.shape[0]
    out_sp = tuple(conv_output_size(s, k, stride, 1, padding) for s in x.shape[1:4])
    if min(out_sp) < 1:
        raise ValueError(f"capsule conv output extent would be {out_sp} for grid {x.shape}")

    taps = k ** 3
    m = n * int(np.prod(out_sp))
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0), (0, 0)))
    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]

    def window(arr, off):
        return tuple(slice(o, o + stride * (e - 1) + 1, stride) for o, e in zip(off, out_sp))

    # one [Cin, M, Ain] slab per kernel tap; vote index i = type * k^3 + tap
    wtap = weight.data.reshape(cin, taps, cout * aout, ain).transpose(1, 0, 3, 2)  # [T, Cin, Ain, JA]
    votes = np.empty((cin, taps, m, cout * aout), dtype=np.result_type(x.dtype, weight.dtype))
    slabs = []
    for t, off in enumerate(offsets):
        sl = (slice(None),) + window(xp, off)
        slab = np.ascontiguousarray(xp[sl].reshape(m, cin, ain).transpose(1, 0, 2))
        slabs.append(slab)
        np.matmul(slab, wtap[t], out=votes[:, t])
    votes = votes.reshape(cin * taps, m, cout * aout)
    if lower_last:
        out = np.ascontiguousarray(votes.transpose(1, 2, 0)).reshape(
            n, *out_sp, cout, aout, cin * taps)
    else:
        out = np.ascontiguousarray(votes.transpose(1, 0, 2)).reshape(
            n, *out_sp, cin * taps, cout, aout)

    def backward(g):
        if lower_last:
            gv = np.ascontiguousarray(g.reshape(m, cout * aout, cin * taps).transpose(2, 0, 1))
        else:
            gv = np.ascontiguousarray(g.reshape(m, cin * taps, cout * aout).transpose(1, 0, 2))
        gv = gv.reshape(cin, taps, m, cout * aout)
        gw = np.empty((taps, cin, ain, cout * aout), dtype=wtap.dtype) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for t, off in enumerate(offsets):
            if gw is not None:
                np.matmul(slabs[t].transpose(0, 2, 1), gv[:, t], out=gw[t])
            if gxp is not None:
                gslab = np.matmul(gv[:, t], wtap[t].transpose(0, 2, 1))  # [Cin, M, Ain]
                sl = (slice(None),) + window(xp, off)
                gxp[sl] += gslab.transpose(1, 0, 2).reshape(n, *out_sp, cin, ain)
        gx = None
        if gxp is not None:
            hh, ww, dd = x.shape[1:4]
            gx = np.ascontiguousarray(gxp[:, p:p + hh, p:p + ww, p:p + dd])
        if gw is not None:
            gw = gw.transpose(1, 0, 3, 2).reshape(weight.shape)
        return gx, gw

    return _result(out, (x, weight), backward, "compute_votes")


def dynamic_routing(
    votes: Tensor,
    iterations: int = 3,
    history: Optional[List[np.ndarray]] = None,
):
    """Routing-by-agreement over votes ``[..., I, J, A]``.

    Coupling logits start at zero; each iteration takes ``r = softmax_j(b)``,
    forms ``c_j = squash(sum_i r_ij v_j|i)`` and, except after the last
    iteration, adds the agreement ``<v_j|i, c_j>`` to the logits. Every step is
    recorded in the graph, so gradients flow through all iterations.

    Returns ``(capsules [..., J, A], r [..., I, J])``. When ``history`` is a
    list, the coupling coefficients of every iteration are appended to it.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    lead = votes.shape[:-1]
    logits = Tensor._wrap(np.zeros(lead, dtype=votes.dtype))
    for it in range(iterations):
        r = T.softmax(logits, axis=-1)
        if history is not None:
            history.append(r.data.copy())
        s = T.sum(T.mul(T.reshape(r, lead + (1,)), votes), axis=-3)
        c = squash(s)
        if it < iterations - 1:
            c_b = T.reshape(c, c.shape[:-2] + (1,) + c.shape[-2:])
            logits = T.add(logits, T.sum(T.mul(votes, c_b), axis=-1))
    return c, r


def routing_fused(votes: Tensor, iterations: int = 3):
    """Single-node equivalent of :func:`dynamic_routing` for votes laid out
    ``[..., J, A, I]`` (lower capsule index last).

    Same arithmetic as the composite version, but every iteration works on
    contiguous lower-capsule rows and the backward pass is written out by
    hand, which keeps full-resolution capsule layers affordable.
    Returns ``(capsules [..., J, A], r [..., I, J])``.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least one iteration, got {iterations}")
    v = votes.data
    lead = v.shape[:-3]
    jn, an, inn = v.shape[-3:]
    vf = v.reshape(-1, jn, an, inn)
    b = np.zeros((vf.shape[0], jn, inn), dtype=v.dtype)
    saved = []
    for it in range(iterations):
        e = np.exp(b - b.max(axis=1, keepdims=True))
        r = e / e.sum(axis=1, keepdims=True)
        s = np.einsum("mjai,mji->mja", vf, r)
        c, cache = _squash_forward(s, SQUASH_EPS)
        saved.append((r, s, c, cache))
        if it < iterations - 1:
            b = b + np.einsum("mjai,mja->mji", vf, c)

    def backward(g):
        gc_out = g.reshape(-1, jn, an)
        gv = np.zeros_like(vf)
        gb = None  # gradient w.r.t. the logits entering the next iteration
        for it in reversed(range(iterations)):
            r, s, c, cache = saved[it]
            if gb is None:
                gc = gc_out
            else:
                gc = np.einsum("mjai,mji->mja", vf, gb)
                gv += np.einsum("mji,mja->mjai", gb, c)
            gs = _squash_backward(s, cache, SQUASH_EPS, gc)
            gv += np.einsum("mja,mji->mjai", gs, r)
            gr = np.einsum("mjai,mja->mji", vf, gs)
            gsoft = r * (gr - (r * gr).sum(axis=1, keepdims=True))
            gb = gsoft if gb is None else gb + gsoft
        return (gv.reshape(v.shape),)

    r_last = saved[-1][0]
    out = _result(saved[-1][2].reshape(*lead, jn, an), (votes,), backward, "routing")
    return out, np.swapaxes(r_last, 1, 2).reshape(*lead, inn, jn)


def capsule_conv3d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    iterations: int = 3,
) -> Tensor:
    """3D convolutional capsule layer: votes, then routing at each output site.

    Every output location runs its own agreement loop. Numerically this is
    ``dynamic_routing(compute_votes(...))``; it goes through the fused
    routing node for speed.
    """
    votes = _votes(x, weight, stride, padding, lower_last=True)
    out, _ = routing_fused(votes, iterations)
    return out


def margin_loss(
    lengths: Tensor,
    onehot,
    m_plus: float = 0.9,
    m_minus: float = 0.1,
    lambda_: float = 0.5,
) -> Tensor:
    """Two-sided hinge on capsule lengths, summed over classes, averaged over sites."""
    t = T._as_tensor(onehot, lengths.dtype)
    if t.shape != lengths.shape:
        raise ValueError(f"onehot shape {t.shape} does not match lengths {lengths.shape}")
    present = T.relu(T.sub(m_plus, lengths))
    absent = T.relu(T.sub(lengths, m_minus))
    per_class = T.add(
        T.mul(t, T.mul(present, present)),
        T.scale(T.mul(T.sub(1.0, t), T.mul(absent, absent)), lambda_),
    )
    return T.mean(T.sum(per_class, axis=-1))
