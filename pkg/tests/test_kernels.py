import numpy as np
import pytest

from moerlab import kernels
from moerlab.numerics import Rng


def test_both_backends_present():
    assert kernels.available_backends() == ["numba", "numpy"]


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("MOERLAB_NO_NUMBA", "1")
    assert kernels._default_backend() == "numpy"
    monkeypatch.setenv("MOERLAB_NO_NUMBA", "0")
    assert kernels._default_backend() == "numba"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_using_restores_previous():
    before = kernels.backend()
    with kernels.using("numpy"):
        assert kernels.backend() == "numpy"
    assert kernels.backend() == before


def test_topk_ties_go_to_lower_index(each_backend):
    v = np.array([[1.0, 3.0, 3.0, 0.0, 3.0], [0.0, 0.0, 0.0, 0.0, 0.0]])
    assert kernels.topk(v, 2).tolist() == [[1, 2], [0, 1]]
    assert kernels.topk(v, 5)[0].tolist() == [1, 2, 4, 0, 3]


def _run_all(rng_seed, act):
    r = Rng(rng_seed)
    B, M, d, h, k = 13, 6, 5, 7, 3
    U = r.normal((B, d))
    sel = kernels.topk(r.normal((B, M)), k)
    W1, b1 = r.normal((M, h, d)), r.normal((M, h))
    W2, b2 = r.normal((M, d, h)), r.normal((M, d))
    gsel = r.normal((B, k))
    dout = r.normal((B, d))
    fwd = kernels.expert_forward(U, sel, W1, b1, W2, b2, act)
    bwd = kernels.expert_backward(U, sel, gsel, *fwd, dout, W1, W2, act)
    mm = kernels.matmul(r.normal((9, 11)), r.normal((11, 4)))
    tk = kernels.topk(r.normal((20, 9)), 4)
    return (mm, tk) + tuple(fwd) + tuple(bwd)


@pytest.mark.parametrize("act", [0, 1])
def test_backends_agree(act):
    with kernels.using("numpy"):
        a = _run_all(5, act)
    with kernels.using("numba"):
        b = _run_all(5, act)
    for x, y in zip(a, b):
        assert x.shape == y.shape
        assert np.max(np.abs(x - y), initial=0.0) <= 1e-12


def test_matmul_is_bitwise_identical_across_backends():
    r = Rng(9)
    a, b = r.normal((17, 23)), r.normal((23, 8))
    with kernels.using("numpy"):
        x = kernels.matmul(a, b)
    with kernels.using("numba"):
        y = kernels.matmul(a, b)
    assert np.array_equal(x, y)


def test_expert_forward_matches_direct_evaluation(each_backend):
    r = Rng(2)
    B, M, d, h = 4, 3, 5, 6
    U = r.normal((B, d))
    sel = np.array([[0, 2], [1, 0], [2, 1], [2, 0]])
    W1, b1, W2, b2 = r.normal((M, h, d)), r.normal((M, h)), r.normal((M, d, h)), r.normal((M, d))
    pre, hid, eout = kernels.expert_forward(U, sel, W1, b1, W2, b2, 1)
    for t in range(B):
        for j, m in enumerate(sel[t]):
            ref = W2[m] @ np.maximum(W1[m] @ U[t] + b1[m], 0.0) + b2[m]
            assert np.allclose(eout[t, j], ref, rtol=0, atol=1e-12)


def test_gelu_tanh_form():
    x = np.array([-3.0, -0.5, 0.0, 0.7, 2.5])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(kernels.activate(x, 0), ref, rtol=0, atol=1e-15)
    h = 1e-6
    fd = (kernels.activate(x + h, 0) - kernels.activate(x - h, 0)) / (2 * h)
    assert np.allclose(kernels.activate_grad(x, 0), fd, atol=1e-8)
