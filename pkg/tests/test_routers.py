import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moerlab import routers
from moerlab.gradcheck import router_gradient_check
from moerlab.numerics import ContractViolation, Rng
from moerlab.routers import (ALL_KINDS, RouterKind, RouterParams, gate_statistics, monte_carlo_scale_init,
                             monte_carlo_scale_samples, param_count, route, router_backward,
                             router_forward, routing_flops, top_k_select)

shapes = st.tuples(st.integers(1, 12), st.integers(1, 10)).flatmap(
    lambda md: st.tuples(st.just(md[0]), st.just(md[1]), st.integers(1, md[0]), st.integers(0, 2**31)))


def _naive_dense(kind, s, gamma=1.0, scale=1.0, eps=1e-8):
    """Elementwise reference written without any vector helpers."""
    if kind == "softmax":
        mx = max(s)
        e = [math.exp(v - mx) for v in s]
        return [v / sum(e) for v in e]
    if kind == "sigmoid":
        return [1.0 / (1.0 + math.exp(-v)) for v in s]
    if kind == "tanh":
        return [math.tanh(v) for v in s]
    if kind == "kern_after_topk":
        return list(s)
    n = math.sqrt(sum(v * v for v in s))
    sbar = [v / (n + eps) for v in s]
    if kind == "kern":
        sbar = [max(v, 0.0) for v in sbar]
    return [gamma * scale * v for v in sbar]


def _make(kind, M, d, seed, **kw):
    r = Rng(seed)
    p = RouterParams.init(kind, M, d, r, **kw)
    p.b = 0.3 * r.normal(M)
    return p, r.normal(d)


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
@settings(max_examples=30, deadline=None)
@given(shapes)
def test_dense_gates_match_naive_reference(kind, shape):
    M, d, k, seed = shape
    p, x = _make(kind, M, d, seed)
    p.gamma = np.array(1.7)
    s = [sum(p.W[m, j] * x[j] for j in range(d)) + p.b[m] for m in range(M)]
    ref = _naive_dense(kind, s, gamma=1.7)
    got = router_forward(p, x).dense_gates
    assert got.shape == (M,)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
@settings(max_examples=30, deadline=None)
@given(shapes)
def test_topk_keeps_exactly_k_positions(kind, shape):
    M, d, k, seed = shape
    p, x = _make(kind, M, d, seed)
    g = route(p, x, k)
    sel = g.selected
    assert len(set(sel.tolist())) == k
    off = np.ones(M, bool)
    off[sel] = False
    assert np.all(g.sparse_gates[off] == 0.0)
    if kind != "kern_after_topk":
        # selection follows dense gate order, ties to the lower index
        order = sorted(range(M), key=lambda m: (-g.dense_gates[m], m))[:k]
        assert sel.tolist() == order


@settings(max_examples=60, deadline=None)
@given(shapes, st.floats(-3, 3), st.floats(0.1, 4))
def test_kern_gate_norm_bound(shape, gamma, scale):
    M, d, k, seed = shape
    for kind in ("kern", "kern_no_relu", "kern_after_topk"):
        p, x = _make(kind, M, d, seed, scale_initial=scale)
        p.gamma = np.array(gamma)
        g = route(p, 10.0 * x, k)
        assert np.linalg.norm(g.sparse_gates) <= abs(gamma) * scale + 1e-9


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_kern_is_not_l1_rescaled(shape):
    M, d, k, seed = shape
    p, x = _make("kern", M, d, seed)
    g = route(p, x, k)
    assert np.array_equal(g.sparse_gates[g.selected], g.dense_gates[g.selected])
    assert np.all(g.dense_gates >= 0.0)


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_softmax_properties(shape):
    M, d, k, seed = shape
    p, x = _make("softmax", M, d, seed)
    dense = router_forward(p, x).dense_gates
    assert math.isclose(dense.sum(), 1.0, rel_tol=0, abs_tol=1e-12)
    pr, _ = _make("softmax", M, d, seed, renormalize=True)
    assert math.isclose(route(pr, x, k).sparse_gates.sum(), 1.0, rel_tol=0, abs_tol=1e-12)


def test_softmax_is_stable_for_huge_logits():
    p = RouterParams(np.eye(3), np.array([1000.0, 999.0, -1000.0]), "softmax")
    g = router_forward(p, np.zeros(3)).dense_gates
    assert np.all(np.isfinite(g))
    assert np.isclose(g[0] / g[1], math.e)


def test_sigmoid_is_stable_for_huge_logits():
    p = RouterParams(np.eye(2), np.array([800.0, -800.0]), "sigmoid")
    g = router_forward(p, np.zeros(2)).dense_gates
    assert g.tolist() == [1.0, 0.0]


def test_kern_zero_logits_give_zero_gates_and_finite_gradient():
    p = RouterParams(np.zeros((4, 3)), np.zeros(4), "kern_no_relu")
    x = np.ones(3)
    g = route(p, x, 2)
    assert np.all(g.sparse_gates == 0.0)
    grads = router_backward(p, g, np.ones(4))
    # at s = 0 the normalization is the identity scaled by 1 / eps
    assert np.allclose(grads.b[g.selected], 1.0 / p.eps)
    assert np.all(np.isfinite(grads.W))


def test_l2_backward_matches_closed_form():
    s = np.array([[3.0, -4.0, 1.0]])
    v = np.array([[0.2, 0.5, -1.0]])
    n = np.linalg.norm(s)
    eps = 1e-8
    ref = v / (n + eps) - s * (v @ s.T) / (n * (n + eps) ** 2)
    out = routers._l2_backward(s, np.array([[n]]), eps, v)
    assert np.allclose(out, ref, rtol=1e-14, atol=0)


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
@settings(max_examples=25, deadline=None)
@given(shapes, st.booleans())
def test_gradients_match_finite_differences(kind, shape, renorm):
    M, d, k, seed = shape
    kw = {"renormalize": renorm} if kind in ("softmax", "sigmoid") else {}
    p, x = _make(kind, M, d, seed, **kw)
    if p.kind.is_kern:
        p.gamma = np.array(0.8)
    w = Rng(seed + 1).normal(M)
    res = router_gradient_check(p, x, k, w)
    assert res.max_error < 1e-4, res.errors


def test_batch_matches_single_rows():
    p, _ = _make("kern", 8, 5, 3)
    X = Rng(4).normal((6, 5))
    gb = route(p, X, 3)
    up = Rng(5).normal((6, 8))
    grads_b = router_backward(p, gb, up)
    W = np.zeros_like(p.W)
    for i in range(6):
        gi = route(p, X[i], 3)
        assert np.allclose(gi.sparse_gates, gb.sparse[i], rtol=0, atol=1e-15)
        gr = router_backward(p, gi, up[i])
        assert np.allclose(gr.x, grads_b.x[i], atol=1e-14)
        W += gr.W
    assert np.allclose(W, grads_b.W, atol=1e-13)


def test_sigmoid_unselected_logits_get_exact_zero_gradient():
    p = RouterParams(np.eye(6), np.zeros(6), "sigmoid")
    x = Rng(1).normal(6)
    g = route(p, x, 2)
    grads = router_backward(p, g, np.ones(6))
    off = np.setdiff1d(np.arange(6), g.selected)
    assert np.all(grads.b[off] == 0.0)


def test_kern_unselected_logits_are_coupled():
    p = RouterParams(np.eye(6), np.zeros(6), "kern")
    x = np.array([2.0, 1.0, 0.5, -0.3, 0.2, -1.0])
    g = route(p, x, 2)
    grads = router_backward(p, g, np.ones(6))
    off = np.setdiff1d(np.arange(6), g.selected)
    assert np.all(grads.b[off] != 0.0)


def test_contracts():
    p, x = _make("kern", 4, 3, 0)
    with pytest.raises(ContractViolation):
        route(p, np.ones(5), 2)
    with pytest.raises(ContractViolation):
        route(p, np.array([1.0, np.nan, 0.0]), 2)
    with pytest.raises(ContractViolation):
        route(p, x, 5)
    with pytest.raises(ContractViolation):
        route(p, x, 0)
    with pytest.raises(ContractViolation):
        RouterParams.init("kern", 4, 3, Rng(0), renormalize=True)
    with pytest.raises(ContractViolation):
        router_backward(p, route(p, x, 2), np.ones(3))
    with pytest.raises(ContractViolation):
        router_backward(p, top_k_select(np.ones(4), 2), np.ones(4))
    with pytest.raises(ValueError):
        RouterKind.parse("noisy_topk")


def test_parse_accepts_aliases():
    assert RouterKind.parse("KERN") is RouterKind.KERN
    assert RouterKind.parse(RouterKind.TANH) is RouterKind.TANH


@pytest.mark.parametrize("M,d", [(4, 8), (64, 768), (8, 16)])
def test_param_count_and_flops(M, d):
    counts = {k: param_count(RouterParams.init(k, M, d, Rng(0))) for k in ALL_KINDS}
    assert counts[RouterKind.SOFTMAX] == M * d + M
    assert counts[RouterKind.KERN] - counts[RouterKind.SOFTMAX] == 1
    fk, fs = routing_flops("kern", M, d, 2), routing_flops("softmax", M, d, 2)
    assert fk["projection"] == fs["projection"] == 2 * M * d + M
    assert fk["selection"] == fs["selection"]
    assert fk["score"] - fs["score"] == 3


def test_gate_statistics():
    p = RouterParams(np.eye(4), np.zeros(4), "kern_no_relu")
    g = route(p, np.array([1.0, -1.0, 0.0, 2.0]), 2)
    stats = gate_statistics(g)
    assert stats == {"zero_gate_fraction": 0.25, "negative_gate_fraction": 0.25,
                     "zero_selected_fraction": 0.0}


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d))),
       st.integers(0, 2**31))
def test_mc_samples_are_at_least_one(dk, seed):
    d, k = dk
    vals = monte_carlo_scale_samples(d, k, 500, Rng(seed))
    assert vals.shape == (500,)
    assert np.all(np.isfinite(vals))
    assert vals.min() >= 1.0 - 4 * np.finfo(float).eps


def test_mc_scale_special_cases():
    assert monte_carlo_scale_init(1, 1, 100, Rng(0)) == 1.0
    a = monte_carlo_scale_init(16, 4, 5000, Rng(3))
    assert a == monte_carlo_scale_init(16, 4, 5000, Rng(3))
    # fewer kept coordinates -> smaller top-k norm -> larger scale
    assert monte_carlo_scale_init(16, 1, 5000, Rng(3)) > a > monte_carlo_scale_init(16, 16, 5000, Rng(3))
    with pytest.raises(ContractViolation):
        monte_carlo_scale_init(4, 5, 10, Rng(0))


def test_mc_matches_independent_oracle():
    from moerlab.verify import mc_oracle
    ours = monte_carlo_scale_init(64, 8, 100_000, Rng(0))
    ref = mc_oracle(64, 8, 100_000, 0)
    assert abs(ours - ref) / ref < 5e-3


def test_zero_fraction_at_init():
    p = RouterParams.init("kern", 64, 32, Rng(8))
    X = Rng(9).normal((10_000, 32))
    frac = np.mean(router_forward(p, X).dense == 0.0)
    assert abs(frac - 0.5) <= 0.02


def _gates(kind, s, k=None, **kw):
    s = np.asarray(s, dtype=float)
    p = RouterParams(np.eye(len(s)), np.zeros(len(s)), kind, eps=1e-300, **kw)
    if k is None:
        return router_forward(p, s).dense_gates
    return route(p, s, k)


def test_worked_dense_examples():
    assert np.allclose(_gates("kern", [3, 4]), [0.6, 0.8], rtol=0, atol=1e-15)
    assert np.allclose(_gates("kern", [-3, 4]), [0.0, 0.8], rtol=0, atol=1e-15)
    assert _gates("softmax", [0, 0]).tolist() == [0.5, 0.5]
    assert _gates("tanh", [0, 0]).tolist() == [0.0, 0.0]
    assert _gates("sigmoid", np.zeros(8)).tolist() == [0.5] * 8


def test_worked_topk_examples():
    g = top_k_select(np.array([0.5, 0.1, 0.7, 0.0]), 2)
    assert g.selected.tolist() == [2, 0] and g.sparse_gates.tolist() == [0.5, 0, 0.7, 0]
    assert top_k_select(np.array([0.3, 0.3, 0.3]), 2).selected.tolist() == [0, 1]
    g = _gates("kern_after_topk", [3, -5, 4], k=2)
    assert sorted(g.selected.tolist()) == [0, 2]
    assert np.allclose(g.sparse_gates, [0.6, 0.0, 0.8], rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_zero_upstream_gives_zero_gradients(kind):
    p, x = _make(kind, 6, 4, 1)
    grads = router_backward(p, route(p, x, 3), np.zeros(6))
    assert not np.any(grads.W) and not np.any(grads.b) and not np.any(grads.x) and grads.gamma == 0


def test_param_count_worked_numbers():
    assert param_count(RouterParams.init("softmax", 64, 768, Rng(0))) == 49_216
    assert param_count(RouterParams.init("kern", 64, 768, Rng(0))) == 49_217


@settings(max_examples=50, deadline=None)
@given(shapes, st.floats(0.01, 100.0))
def test_kern_selection_is_scale_invariant(shape, c):
    M, d, k, seed = shape
    # with eps negligible the normalized logits do not see a positive rescaling of x
    p, x = _make("kern", M, d, seed, eps=1e-300)
    p.b = np.zeros(M)
    a, b = route(p, x, k), route(p, c * x, k)
    assert np.allclose(a.dense_gates, b.dense_gates, rtol=1e-12, atol=1e-15)
    # exact ties may resolve differently after rounding; compare the selected values
    assert np.allclose(np.sort(a.dense_gates[a.selected]), np.sort(b.dense_gates[b.selected]),
                       rtol=1e-12, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(shapes)
def test_softmax_gates_strictly_inside_unit_interval(shape):
    M, d, k, seed = shape
    p, x = _make("softmax", M, d, seed)
    g = router_forward(p, x).dense_gates
    assert np.all(g > 0) and (M == 1 or np.all(g < 1))
