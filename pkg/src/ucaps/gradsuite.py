"""Finite-difference audit of every differentiable op and a tiny end-to-end network.

Each case draws fresh random inputs per instance and compares ``backward()``
against central differences in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .capsules import (_votes, compute_votes, dynamic_routing, margin_loss, routing_fused,
                       squash)
from .conv import BatchNormState, batchnorm, conv3d, conv_transpose3d, same_padding
from .gradcheck import check_gradients, relative_error
from .losses import masked_mse, total_loss, weighted_cross_entropy
from .tensor import Tensor, no_grad, shadow_precision

__all__ = ["GradResult", "CASES", "run_case", "run_suite", "network_spot_check", "TOLERANCE"]

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    instances: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<22} n={self.instances:<3d} max_rel_err={self.worst:.3e}"


def _proj(rng, shape):
    """Random projection so vector-valued ops reduce to a generic scalar."""
    return rng.normal(size=shape)


def _dot(y: Tensor, w) -> Tensor:
    return T.sum(T.mul(y, w))


# each case: rng -> max relative error for one random instance
def _unary(op, positive=False, away=0.0):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
        x = rng.normal(size=shape)
        if positive:
            x = np.abs(x) + 0.5
        if away:
            x = np.where(np.abs(x) < away, away * np.sign(x + 1e-12), x)
        w = _proj(rng, shape)
        return check_gradients(lambda a: _dot(op(a), w), [x])
    return case


def _binary(op, positive_rhs=False):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=3))
        # broadcast the right operand along a random subset of axes
        rshape = tuple(1 if rng.random() < 0.4 else s for s in shape)
        a = rng.normal(size=shape)
        b = rng.normal(size=rshape)
        if positive_rhs:
            b = np.abs(b) + 0.5
        w = _proj(rng, shape)
        return check_gradients(lambda x, y: _dot(op(x, y), w), [a, b])
    return case


def _axis_case(op):
    def case(rng):
        shape = tuple(rng.integers(2, 5, size=3))
        axis = int(rng.integers(0, 3))
        x = rng.normal(size=shape)
        y_shape = op(Tensor(x), axis).shape
        w = _proj(rng, y_shape)
        return check_gradients(lambda a: _dot(op(a, axis), w), [x])
    return case


def _case_reshape(rng):
    x = rng.normal(size=(2, 3, 4))
    w = _proj(rng, (4, 6))
    return check_gradients(lambda a: _dot(T.reshape(a, (4, 6)), w), [x])


def _case_transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    perm = tuple(rng.permutation(3))
    w = _proj(rng, tuple(x.shape[p] for p in perm))
    return check_gradients(lambda a: _dot(T.transpose(a, perm), w), [x])


def _case_concat(rng):
    axis = int(rng.integers(0, 3))
    s1 = [2, 3, 2]
    s2 = list(s1)
    s2[axis] = int(rng.integers(1, 4))
    a, b = rng.normal(size=s1), rng.normal(size=s2)
    out_shape = list(s1)
    out_shape[axis] += s2[axis]
    w = _proj(rng, out_shape)
    return check_gradients(lambda x, y: _dot(T.concat([x, y], axis=axis), w), [a, b])


def _case_norm(rng):
    x = rng.normal(size=(3, 4, 3))
    w = _proj(rng, (3, 4))
    return check_gradients(lambda a: _dot(T.norm_along(a, axis=-1), w), [x])


def _case_mse(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return check_gradients(lambda x, y: T.mse(x, y), [a, b])


# configurations the network actually uses: (k, stride, dilation, same padding?)
_CONV_SETTINGS = [(5, 1, 1, True), (5, 1, 3, True), (3, 1, 1, True), (1, 1, 1, False),
                  (3, 2, 1, True), (2, 2, 1, False), (3, 1, 2, False)]


def _case_conv3d(rng):
    k, s, d, same = _CONV_SETTINGS[int(rng.integers(len(_CONV_SETTINGS)))]
    pad = same_padding(k, d) if same else int(rng.integers(0, 2))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    span = d * (k - 1) + 1
    sp = tuple(int(rng.integers(max(1, span - 2 * pad), span - 2 * pad + 3)) for _ in range(3))
    x = rng.normal(size=(1, cin, *sp))
    wt = rng.normal(size=(cout, cin, k, k, k)) * 0.3
    b = rng.normal(size=cout)
    out = conv3d(Tensor(x), Tensor(wt), Tensor(b), s, d, pad)
    w = _proj(rng, out.shape)
    return check_gradients(lambda a, f, c: _dot(conv3d(a, f, c, s, d, pad), w), [x, wt, b])


def _case_conv_transpose(rng):
    k, s = [(2, 2), (3, 2), (2, 1)][int(rng.integers(3))]
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(1, cin, *rng.integers(1, 4, size=3)))
    wt = rng.normal(size=(cin, cout, k, k, k))
    b = rng.normal(size=cout)
    out = conv_transpose3d(Tensor(x), Tensor(wt), Tensor(b), s)
    w = _proj(rng, out.shape)
    return check_gradients(lambda a, f, c: _dot(conv_transpose3d(a, f, c, s), w), [x, wt, b])


def _case_batchnorm(rng):
    training = bool(rng.integers(2))
    c = int(rng.integers(1, 4))
    x = rng.normal(size=(2, c, 2, 3, 2)) * 2 + 1
    g, bta = rng.normal(size=c), rng.normal(size=c)
    state = BatchNormState(c, dtype=np.float64)
    state.mean[:] = rng.normal(size=c)
    state.var[:] = rng.random(c) + 0.5
    w = _proj(rng, x.shape)

    def f(a, gamma, beta):
        st = BatchNormState(c, dtype=np.float64)
        st.mean[:], st.var[:] = state.mean, state.var
        return _dot(batchnorm(a, gamma, beta, st, training), w)

    return check_gradients(f, [x, g, bta])


def _case_squash(rng):
    x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 5)))) * rng.choice([0.1, 1, 5])
    w = _proj(rng, x.shape)
    return check_gradients(lambda a: _dot(squash(a), w), [x])


def _grid_and_weight(rng):
    cin, ain = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    cout, aout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    x = rng.normal(size=(1, *rng.integers(2, 4, size=3), cin, ain))
    wt = rng.normal(size=(cin, k, k, k, cout, aout, ain)) * 0.5
    stride = int(rng.integers(1, 3))
    return x, wt, stride, k // 2


def _case_votes(rng):
    x, wt, s, p = _grid_and_weight(rng)
    out = compute_votes(Tensor(x), Tensor(wt), s, p)
    w = _proj(rng, out.shape)
    return check_gradients(lambda a, f: _dot(compute_votes(a, f, s, p), w), [x, wt])


def _case_routing(rng):
    it = int(rng.integers(1, 4))
    votes = rng.normal(size=(2, int(rng.integers(2, 6)), int(rng.integers(1, 4)), 3))
    w = _proj(rng, votes.shape[:1] + votes.shape[2:])
    return check_gradients(lambda v: _dot(dynamic_routing(v, it)[0], w), [votes])


def _case_routing_fused(rng):
    it = int(rng.integers(1, 4))
    votes = rng.normal(size=(2, int(rng.integers(1, 4)), 3, int(rng.integers(2, 6))))
    w = _proj(rng, votes.shape[:-1])
    return check_gradients(lambda v: _dot(routing_fused(v, it)[0], w), [votes])


def _case_capsule_conv(rng):
    from .capsules import capsule_conv3d
    x, wt, s, p = _grid_and_weight(rng)
    it = int(rng.integers(1, 4))
    out = capsule_conv3d(Tensor(x), Tensor(wt), s, p, it)
    w = _proj(rng, out.shape)
    return check_gradients(lambda a, f: _dot(capsule_conv3d(a, f, s, p, it), w), [x, wt])


def _case_margin(rng):
    k = int(rng.integers(2, 5))
    lengths = rng.random((3, k)) * 0.98 + 0.01
    onehot = np.eye(k)[rng.integers(0, k, 3)]
    return check_gradients(lambda l: margin_loss(l, onehot), [lengths])


def _case_wce(rng):
    k = int(rng.integers(2, 5))
    logits = rng.normal(size=(2, k, 2, 2, 3))
    labels = rng.integers(0, k, size=(2, 2, 2, 3))
    cw = rng.random(k) + 0.1
    return check_gradients(lambda z: weighted_cross_entropy(z, labels, cw), [logits])


def _case_masked_mse(rng):
    recon = rng.random((2, 1, 2, 3, 2))
    image = rng.random((2, 1, 2, 3, 2))
    labels = rng.integers(0, 3, size=(2, 2, 3, 2))
    return check_gradients(lambda r: masked_mse(r, image, labels), [recon])


CASES: Dict[str, Callable] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_rhs=True),
    "neg": _unary(T.neg),
    "scale": _unary(lambda a: T.scale(a, 1.7)),
    "relu": _unary(T.relu, away=1e-3),
    "sigmoid": _unary(T.sigmoid),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True),
    "sum": _axis_case(lambda a, ax: T.sum(a, axis=ax)),
    "mean": _axis_case(lambda a, ax: T.mean(a, axis=ax)),
    "softmax": _axis_case(lambda a, ax: T.softmax(a, axis=ax)),
    "log_softmax": _axis_case(lambda a, ax: T.log_softmax(a, axis=ax)),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "norm_along": _case_norm,
    "mse": _case_mse,
    "conv3d": _case_conv3d,
    "conv_transpose3d": _case_conv_transpose,
    "batchnorm": _case_batchnorm,
    "squash": _case_squash,
    "compute_votes": _case_votes,
    "dynamic_routing": _case_routing,
    "routing_fused": _case_routing_fused,
    "capsule_conv3d": _case_capsule_conv,
    "margin_loss": _case_margin,
    "weighted_cross_entropy": _case_wce,
    "masked_mse": _case_masked_mse,
}


def run_case(name: str, instances: int = 20, seed: int = 0) -> GradResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    with shadow_precision():
        for _ in range(instances):
            worst = max(worst, CASES[name](rng))
    return GradResult(name, instances, worst)


def tiny_network_config(**overrides):
    from .network import NetworkConfig
    params = dict(in_channels=1, num_classes=3, feature_channels=(2, 3, 4), feature_kernel=3,
                  feature_dilations=(1, 2, 2), capsule_types=(2, 2, 2, 2, 2, 3),
                  capsule_dims=(2, 2, 3, 3, 4, 4), decoder_channels=(4, 4, 4))
    params.update(overrides)
    return NetworkConfig(**params)


def network_spot_check(rng, coords_per_param: int = 2, n_params: int = 3,
                       h: float = 1e-6, config=None) -> float:
    """Total-loss gradient of a tiny float64 network vs. central differences.

    Checks ``coords_per_param`` random entries of ``n_params`` randomly chosen
    parameter tensors on an 8^3 input.
    """
    from .network import UCapsNet
    with shadow_precision():
        cfg = config or tiny_network_config(seed=int(rng.integers(1 << 30)))
        net = UCapsNet(cfg).astype(np.float64)
        # zero biases and beta put whole relu regions exactly on the kink, where
        # central differences average the one-sided slopes; use generic values
        for name, p in net.parameters().items():
            if name.endswith(".bias"):
                p.data[...] = rng.uniform(-0.1, 0.1, p.shape)
            elif name.endswith(".beta"):
                p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
            elif name.endswith(".gamma"):
                p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        x = rng.random((2, cfg.in_channels, 8, 8, 8))
        y = rng.integers(0, cfg.num_classes, size=(2, 8, 8, 8))
        cw = rng.random(cfg.num_classes) + 0.5
        params = net.parameters()

        def loss():
            return total_loss(net(Tensor(x)), y, x, cfg, cw).total

        net.zero_grad()
        loss().backward()
        names = sorted(params)
        picks = rng.choice(len(names), size=min(n_params, len(names)), replace=False)
        analytic, numeric = [], []
        for i in picks:
            p = params[names[i]]
            flat = p.data.reshape(-1)
            for j in rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False):
                analytic.append(p.grad.reshape(-1)[j])
                orig = flat[j]
                with no_grad():
                    flat[j] = orig + h
                    up = loss().item()
                    flat[j] = orig - h
                    down = loss().item()
                flat[j] = orig
                numeric.append((up - down) / (2 * h))
        return relative_error(np.array(analytic), np.array(numeric))


def run_suite(instances: int = 20, seed: int = 0, full: bool = False,
              names: Optional[List[str]] = None) -> List[GradResult]:
    """All op cases plus the network spot check.

    ``full`` checks every entry of every parameter of the tiny network instead
    of a few random coordinates (slow).
    """
    results = [run_case(n, instances, seed) for n in (names or CASES)]
    if names is None:
        rng = np.random.default_rng([seed, 7])
        worst = 0.0
        net_instances = instances
        for _ in range(net_instances):
            if full:
                worst = max(worst, network_spot_check(rng, coords_per_param=10 ** 9,
                                                      n_params=10 ** 9))
            else:
                worst = max(worst, network_spot_check(rng))
        results.append(GradResult("network_end_to_end", net_instances, worst))
    return results
