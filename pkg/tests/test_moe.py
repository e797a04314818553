import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moerlab.gradcheck import moe_gradient_check, rel_error
from moerlab.moe import (MoeLayer, load_checkpoint, moe_backward, moe_forward, moe_forward_dense,
                         output_scale_probe, save_checkpoint)
from moerlab.numerics import ContractViolation, Rng
from moerlab.routers import ALL_KINDS


def _layer(kind, M=6, d=5, h=4, k=2, seed=0, **kw):
    r = Rng(seed)
    layer = MoeLayer.init(kind, M, d, h, k, r, **kw)
    layer.b1[...] = 0.1 * r.normal(layer.b1.shape)
    layer.b2[...] = 0.1 * r.normal(layer.b2.shape)
    layer.router.b[...] = 0.1 * r.normal(M)
    return layer


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_dispatch_matches_dense_reference(kind, each_backend):
    layer = _layer(kind, M=8, d=6, h=5, k=3, activation="relu")
    X = Rng(1).normal((20, 6))
    out, _ = moe_forward(layer, X)
    assert np.max(np.abs(out - moe_forward_dense(layer, X))) < 1e-13


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
@pytest.mark.parametrize("activation", ["gelu", "relu"])
def test_full_finite_difference(kind, activation, each_backend):
    layer = _layer(kind, M=4, d=5, h=3, k=2, seed=3, activation=activation)
    res = moe_gradient_check(layer, Rng(4).normal(5), Rng(5), full=True)
    assert res.max_error < 1e-6, res.errors


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([k.value for k in ALL_KINDS]), st.integers(2, 16), st.integers(2, 9),
       st.integers(0, 2**31))
def test_sampled_finite_difference(kind, M, d, seed):
    k = 1 + seed % M
    layer = _layer(kind, M=M, d=d, h=4, k=k, seed=seed)
    res = moe_gradient_check(layer, Rng(seed + 1).normal(d), Rng(seed + 2))
    assert res.max_error < 1e-4, res.errors


def test_unselected_experts_get_no_gradient():
    layer = _layer("kern", M=8, d=4, h=3, k=2)
    x = Rng(2).normal(4)
    out, cache = moe_forward(layer, x)
    grads = moe_backward(layer, cache, np.ones(4))
    sel = set(cache.gates.selected_idx[0].tolist())
    for m in range(8):
        touched = np.any(grads.params["experts.W1"][m] != 0)
        assert touched == (m in sel)


def test_batch_gradient_is_sum_of_rows():
    layer = _layer("softmax", M=5, d=4, h=3, k=2)
    X = Rng(7).normal((3, 4))
    up = Rng(8).normal((3, 4))
    _, cache = moe_forward(layer, X)
    gb = moe_backward(layer, cache, up)
    total = None
    for i in range(3):
        _, c = moe_forward(layer, X[i])
        g = moe_backward(layer, c, up[i])
        assert np.allclose(g.x, gb.x[i], atol=1e-14)
        total = g.params if total is None else {n: total[n] + g.params[n] for n in total}
    for n in total:
        assert np.allclose(total[n], gb.params[n], atol=1e-13)


def test_param_counts():
    layer = _layer("kern", M=64, d=16, h=32, k=8)
    per = 2 * 16 * 32 + 32 + 16
    assert layer.expert_param_size() == per
    router = 64 * 16 + 64 + 1
    assert layer.param_count() == router + 64 * per
    assert layer.active_param_count() == router + 8 * per
    assert (layer.param_count() - router) == 8 * (layer.active_param_count() - router)
    soft = _layer("softmax", M=64, d=16, h=32, k=8)
    assert layer.active_param_count() - soft.active_param_count() == 1


def test_checkpoint_round_trip(tmp_path):
    layer = _layer("softmax", M=5, d=4, h=3, k=2, renormalize=True, activation="relu")
    layer.router.gamma = np.array(1.25)
    path = tmp_path / "l.bin"
    save_checkpoint(layer, path)
    back = load_checkpoint(path)
    assert back.k == 2 and back.activation == "relu" and back.router.renormalize
    assert back.router.kind is layer.router.kind
    for name, p in layer.params().items():
        assert np.array_equal(back.params()[name], p)
    X = Rng(3).normal((4, 4))
    assert np.array_equal(moe_forward(back, X)[0], moe_forward(layer, X)[0])
    # body is float64 little endian right after the 40-byte header
    raw = path.read_bytes()
    assert raw[:8] == b"MOELAYER"
    assert len(raw) == 40 + 8 * (3 + 5 * 4 + 5 + 5 * (2 * 4 * 3 + 3 + 4))


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMOE!!" + bytes(32))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    layer = _layer("kern")
    good = tmp_path / "g.bin"
    save_checkpoint(layer, good)
    (tmp_path / "t.bin").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.bin")


def test_contracts():
    layer = _layer("kern")
    with pytest.raises(ContractViolation):
        moe_backward(layer, None, np.ones(5))
    _, cache = moe_forward(layer, np.ones(5))
    with pytest.raises(ContractViolation):
        moe_backward(layer, cache, np.ones(4))
    with pytest.raises(ContractViolation):
        MoeLayer.init("kern", 4, 3, 2, 5, Rng(0))
    with pytest.raises(ContractViolation):
        MoeLayer.init("kern", 4, 3, 2, 2, Rng(0), activation="swish")


def test_output_scale_is_flat_across_expert_counts():
    est = [output_scale_probe("kern", M, M // 8, 32, 16, 4000, Rng(M)) for M in (8, 64, 256)]
    assert max(est) / min(est) < 2.0


def test_output_scale_probe_is_deterministic():
    a = output_scale_probe("softmax", 8, 2, 6, 4, 300, Rng(1))
    assert a == output_scale_probe("softmax", 8, 2, 6, 4, 300, Rng(1))
    with pytest.raises(ContractViolation):
        output_scale_probe("softmax", 8, 2, 6, 4, 0, Rng(1))


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.full(3, 1e-9)) < 1e-4
    assert rel_error(np.ones(3), -np.ones(3)) == 2.0


def test_uniform_softmax_mixture_is_mean():
    layer = _layer("softmax", M=5, d=4, h=3, k=5)
    layer.router.W[...] = 0.0
    layer.router.b[...] = 0.0
    x = Rng(11).normal(4)
    out, _ = moe_forward(layer, x)
    assert np.allclose(out, np.mean([e(x) for e in layer.experts], axis=0), rtol=0, atol=1e-14)


def test_single_active_expert():
    layer = _layer("kern", M=6, d=4, h=3, k=1)
    x = Rng(12).normal(4)
    out, cache = moe_forward(layer, x)
    m = int(cache.gates.selected_idx[0, 0])
    assert np.allclose(out, cache.gates.sparse[0, m] * layer.expert(m)(x), rtol=0, atol=1e-14)


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_zero_upstream_zero_gradients(kind):
    layer = _layer(kind)
    _, cache = moe_forward(layer, Rng(13).normal(5))
    grads = moe_backward(layer, cache, np.zeros(5))
    assert all(not np.any(g) for g in grads.params.values()) and not np.any(grads.x)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31), st.floats(-3, 3))
def test_kern_output_norm_bound(M, seed, gamma):
    k = 1 + seed % M
    layer = _layer("kern", M=M, d=5, h=4, k=k, seed=seed)
    layer.router.gamma = np.array(gamma)
    x = 4 * Rng(seed).normal(5)
    out, cache = moe_forward(layer, x)
    g = cache.gates.sparse[0]
    biggest = max(np.linalg.norm(e(x)) for e in layer.experts)
    assert np.linalg.norm(out) <= np.linalg.norm(g) * biggest * np.sqrt(k) + 1e-12


def test_probe_single_expert_is_positive():
    assert output_scale_probe("sigmoid", 1, 1, 4, 3, 200, Rng(0)) > 0


def test_dispatch_matches_dense_on_many_instances():
    r = Rng(14)
    for i in range(1000):
        kind = ALL_KINDS[i % len(ALL_KINDS)]
        layer = _layer(kind, M=8, d=4, h=3, k=3, seed=i)
        x = r.normal(4)
        assert np.max(np.abs(moe_forward(layer, x)[0] - moe_forward_dense(layer, x))) <= 1e-12
