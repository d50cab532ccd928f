import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucaps import tensor as T
from ucaps.capsules import (capsule_conv3d, compute_votes, dynamic_routing, margin_loss,
                            routing_fused, squash)
from ucaps.gradcheck import check_gradients
from ucaps.tensor import Tensor, shadow_precision


def np_squash(s, eps=1e-7):
    n = np.sqrt((s * s).sum(-1, keepdims=True))
    return n * n / (1 + n * n) * s / (n + eps)


def loop_votes(x, w, stride, pad):
    """Per-site matrix multiply: votes[n, h, w, d, ci*k^3 + tap, j] = W[ci, tap, j] @ x[site + tap]."""
    n, h, wd, d, cin, ain = x.shape
    _, k, _, _, cout, aout, _ = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, d + 2 * pad, cin, ain))
    xp[:, pad:pad + h, pad:pad + wd, pad:pad + d] = x
    oh, ow, od = [(s + 2 * pad - k) // stride + 1 for s in (h, wd, d)]
    out = np.zeros((n, oh, ow, od, cin * k ** 3, cout, aout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for l in range(od):
                    for ci in range(cin):
                        for a in range(k):
                            for c in range(k):
                                for e in range(k):
                                    lower = ci * k ** 3 + (a * k + c) * k + e
                                    vec = xp[b, i * stride + a, j * stride + c, l * stride + e, ci]
                                    for co in range(cout):
                                        out[b, i, j, l, lower, co] = w[ci, a, c, e, co] @ vec
    return out


def scripted_routing(votes, iterations):
    """Step-by-step routing for votes [I, J, A] with explicit loops."""
    ni, nj, _ = votes.shape
    b = np.zeros((ni, nj))
    rs = []
    for it in range(iterations):
        r = np.zeros((ni, nj))
        for i in range(ni):
            e = [np.exp(b[i, j]) for j in range(nj)]
            for j in range(nj):
                r[i, j] = e[j] / sum(e)
        rs.append(r)
        c = np.zeros((nj, votes.shape[2]))
        for j in range(nj):
            s = sum(r[i, j] * votes[i, j] for i in range(ni))
            norm = np.sqrt(float(s @ s))
            c[j] = norm ** 2 / (1 + norm ** 2) * s / (norm + 1e-7)
        if it < iterations - 1:
            for i in range(ni):
                for j in range(nj):
                    b[i, j] += float(votes[i, j] @ c[j])
    return c, rs


# -- squash ------------------------------------------------------------------

def test_squash_zero_vector_is_fixed_point():
    np.testing.assert_array_equal(squash(Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))


def test_squash_unit_and_norm_three():
    with shadow_precision():
        s = Tensor([[0.6, 0.8]])
        np.testing.assert_allclose(squash(s).data, 0.5 * s.data, atol=1e-6)
        out = squash(Tensor([[3.0, 0.0, 0.0]])).data
    assert np.linalg.norm(out) == pytest.approx(0.9 * 3 / (3 + 1e-7), abs=1e-12)


def test_squash_gradient_finite_at_zero():
    x = Tensor(np.zeros((1, 4)), requires_grad=True, dtype=np.float64)
    T.sum(squash(x)).backward()
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=6),
       st.floats(1.01, 4.0))
def test_squash_norm_below_one_and_monotone(vec, factor):
    with shadow_precision():
        s = np.array(vec)
        a = np.linalg.norm(squash(Tensor(s[None])).data)
        b = np.linalg.norm(squash(Tensor(factor * s[None])).data)
    assert a < 1 and b < 1
    assert b >= a
    if np.linalg.norm(s) > 0:
        # direction preserved
        out = squash(Tensor(s[None], dtype=np.float64)).data[0]
        assert out @ s >= 0


def test_squash_matches_formula():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(5, 4))
    with shadow_precision():
        np.testing.assert_allclose(squash(Tensor(s)).data, np_squash(s), rtol=1e-12)


# -- votes -------------------------------------------------------------------

def test_identity_votes():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 2, 2, 1, 3))
    w = np.eye(3).reshape(1, 1, 1, 1, 1, 3, 3)
    with shadow_precision():
        v = compute_votes(Tensor(x), Tensor(w)).data
    np.testing.assert_array_equal(v.reshape(x.shape), x)


def test_zero_input_zero_votes():
    w = np.random.default_rng(2).normal(size=(2, 3, 3, 3, 2, 4, 3))
    v = compute_votes(Tensor(np.zeros((1, 3, 3, 3, 2, 3))), Tensor(w), padding=1).data
    assert not v.any()


def test_votes_match_per_site_oracle_hand_weights():
    x = np.arange(1, 1 + 2 * 2 * 2 * 2, dtype=np.float64).reshape(1, 2, 2, 2, 1, 2) / 10
    w = np.zeros((1, 2, 2, 2, 2, 2, 2))
    for a in range(2):
        for c in range(2):
            for e in range(2):
                w[0, a, c, e, 0] = [[a + 1, -c], [e, 1]]
                w[0, a, c, e, 1] = [[0.5, 0], [0, -0.5]]
    with shadow_precision():
        got = compute_votes(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(got, loop_votes(x, w, 1, 0), atol=1e-6)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_votes_match_oracle_random(stride, pad):
    rng = np.random.default_rng(stride * 3 + pad)
    x = rng.normal(size=(2, 4, 3, 4, 2, 3))
    w = rng.normal(size=(2, 3, 3, 3, 3, 2, 3))
    with shadow_precision():
        got = compute_votes(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, loop_votes(x, w, stride, pad), atol=1e-10)


def test_votes_shape_mismatch():
    with pytest.raises(ValueError):
        compute_votes(Tensor(np.zeros((1, 2, 2, 2, 1, 3))), Tensor(np.zeros((1, 1, 1, 1, 1, 2, 4))))


# -- routing -----------------------------------------------------------------

HAND_VOTES = np.array([[[1.0, 0.5], [-0.3, 0.8]],
                       [[0.9, 0.7], [0.4, -1.2]]])  # [I=2, J=2, A=2]


def test_routing_hand_case_matches_scripted_oracle():
    want_c, want_rs = scripted_routing(HAND_VOTES, 3)
    hist = []
    with shadow_precision():
        c, r = dynamic_routing(Tensor(HAND_VOTES), 3, history=hist)
    np.testing.assert_allclose(c.data, want_c, atol=1e-6)
    np.testing.assert_allclose(r.data, want_rs[-1], atol=1e-6)
    for got, want in zip(hist, want_rs):
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_fused_routing_hand_case():
    want_c, want_rs = scripted_routing(HAND_VOTES, 3)
    with shadow_precision():
        c, r = routing_fused(Tensor(np.moveaxis(HAND_VOTES, 0, -1)), 3)
    np.testing.assert_allclose(c.data, want_c, atol=1e-6)
    np.testing.assert_allclose(r, want_rs[-1], atol=1e-6)


def test_single_upper_capsule_is_squash_of_sum():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(2, 3, 7, 1, 4)).astype(np.float32)
    c, r = dynamic_routing(Tensor(v), 3)
    assert np.all(r.data == 1.0)
    np.testing.assert_array_equal(c.data, squash(Tensor(v.sum(axis=-3))).data)


def test_identical_votes_keep_uniform_coupling():
    v = np.repeat(np.random.default_rng(4).normal(size=(5, 1, 3)), 4, axis=1)
    hist = []
    with shadow_precision():
        dynamic_routing(Tensor(v), 3, history=hist)
    for r in hist:
        np.testing.assert_allclose(r, 0.25, atol=1e-12)


def test_routing_rejects_zero_iterations():
    with pytest.raises(ValueError):
        dynamic_routing(Tensor(np.zeros((2, 2, 2))), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
def test_routing_coefficients_normalized_every_iteration(seed, iterations, cout):
    rng = np.random.default_rng(seed)
    v = rng.normal(scale=rng.uniform(0.1, 5), size=(2, 2, 2, 3, 6, cout, 3)).astype(np.float32)
    hist = []
    dynamic_routing(Tensor(v), iterations, history=hist)
    assert len(hist) == iterations
    for r in hist:
        assert np.all(r >= 0)
        np.testing.assert_allclose(r.sum(axis=-1), 1.0, atol=1e-6)


def test_agreement_concentrates_on_aligned_capsule():
    rng = np.random.default_rng(5)
    ni, nj, a = 8, 3, 4
    v = rng.normal(size=(ni, nj, a))
    direction = np.array([1.0, 0.5, -0.2, 0.3])
    v[:, 0] = direction * 2 + rng.normal(scale=0.05, size=(ni, a))
    hist = []
    with shadow_precision():
        dynamic_routing(Tensor(v), 5, history=hist)
    mass = [r[:, 0].sum() for r in hist]
    assert all(b >= a - 1e-12 for a, b in zip(mass, mass[1:]))
    assert mass[-1] > mass[0]


def test_fused_and_composite_agree_forward_and_backward():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(2, 3, 5, 4, 3))  # [..., I, J, A]
    probe = rng.normal(size=(2, 3, 4, 3))
    with shadow_precision():
        a = Tensor(v, requires_grad=True)
        ca, ra = dynamic_routing(a, 3)
        T.sum(ca * Tensor(probe)).backward()
        b = Tensor(np.moveaxis(v, -3, -1).copy(), requires_grad=True)
        cb, rb = routing_fused(b, 3)
        T.sum(cb * Tensor(probe)).backward()
    np.testing.assert_allclose(ca.data, cb.data, atol=1e-12)
    np.testing.assert_allclose(ra.data, rb, atol=1e-12)
    np.testing.assert_allclose(a.grad, np.moveaxis(b.grad, -1, -3), atol=1e-12)


def test_routing_gradients():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(3, 2, 3))
    probe = rng.normal(size=(2, 3))
    err = check_gradients(lambda t: T.sum(dynamic_routing(t, 3)[0] * Tensor(probe, dtype=t.dtype)),
                          [v])
    assert err < 1e-4
    vf = np.moveaxis(v, 0, -1).copy()
    err = check_gradients(lambda t: T.sum(routing_fused(t, 3)[0] * Tensor(probe, dtype=t.dtype)),
                          [vf])
    assert err < 1e-4


# -- capsule conv ---------------------------------------------------------------

def test_capsule_conv_identity_is_squash():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 3, 2, 1, 4))
    w = np.eye(4).reshape(1, 1, 1, 1, 1, 4, 4)
    with shadow_precision():
        out = capsule_conv3d(Tensor(x), Tensor(w), iterations=1).data
    np.testing.assert_allclose(out, np_squash(x), atol=1e-12)


def test_capsule_conv_stride_two_shape():
    w = np.random.default_rng(9).normal(size=(2, 3, 3, 3, 3, 4, 2))
    out = capsule_conv3d(Tensor(np.ones((1, 4, 4, 4, 2, 2))), Tensor(w), stride=2, padding=1)
    assert out.shape == (1, 2, 2, 2, 3, 4)


def test_capsule_conv_matches_composed_oracles():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 3, 3, 3, 2, 2))
    w = rng.normal(scale=0.5, size=(2, 3, 3, 3, 2, 3, 2))
    with shadow_precision():
        got = capsule_conv3d(Tensor(x), Tensor(w), padding=1, iterations=3).data
    votes = loop_votes(x, w, 1, 1)
    want = np.zeros(got.shape)
    for i in range(3):
        for j in range(3):
            for l in range(3):
                want[0, i, j, l] = scripted_routing(votes[0, i, j, l], 3)[0]
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_capsule_conv_spatial_permutation_equivariance():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 3, 2, 2, 2, 3))
    w = rng.normal(size=(2, 1, 1, 1, 3, 2, 3))
    perm = rng.permutation(12)
    flat = x.reshape(1, 12, 2, 3)
    xp = flat[:, perm].reshape(x.shape)
    with shadow_precision():
        a = capsule_conv3d(Tensor(x), Tensor(w)).data.reshape(1, 12, 3, 2)
        b = capsule_conv3d(Tensor(xp), Tensor(w)).data.reshape(1, 12, 3, 2)
    np.testing.assert_allclose(a[:, perm], b, atol=1e-12)


def test_capsule_conv_gradient_on_small_grid():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 2, 2, 2, 2, 2))
    w = rng.normal(size=(2, 3, 3, 3, 2, 2, 2))
    probe = rng.normal(size=(1, 2, 2, 2, 2, 2))
    err = check_gradients(
        lambda a, b: T.sum(capsule_conv3d(a, b, padding=1) * Tensor(probe, dtype=a.dtype)), [x, w])
    assert err < 1e-4


# -- margin loss --------------------------------------------------------------------

def test_margin_loss_zero_when_hinges_inactive():
    lengths = np.array([[0.9, 0.1, 0.05], [0.0, 0.95, 0.1]])
    onehot = np.array([[1, 0, 0], [0, 1, 0]])
    assert margin_loss(Tensor(lengths), onehot).item() == pytest.approx(0.0, abs=1e-12)


def test_margin_loss_all_zero_lengths():
    onehot = np.eye(4)[[2]]
    assert margin_loss(Tensor(np.zeros((1, 4)), dtype=np.float64), onehot).item() == \
        pytest.approx(0.81)


def test_margin_loss_matches_direct_formula():
    rng = np.random.default_rng(13)
    lengths = rng.uniform(0, 1, size=(3, 4, 5))
    onehot = np.eye(5)[rng.integers(0, 5, size=(3, 4))]
    want = np.mean([sum(onehot[a, b, k] * max(0, 0.9 - lengths[a, b, k]) ** 2
                        + 0.5 * (1 - onehot[a, b, k]) * max(0, lengths[a, b, k] - 0.1) ** 2
                        for k in range(5))
                    for a in range(3) for b in range(4)])
    with shadow_precision():
        got = margin_loss(Tensor(lengths), onehot).item()
    assert got == pytest.approx(want, rel=1e-12)
