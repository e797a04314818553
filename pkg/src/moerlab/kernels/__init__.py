"""Hot numeric loops with a switchable backend.

Two implementations of each kernel live side by side: numba ``@njit`` loops
(``_numba_impl``) and pure numpy (``_numpy_impl``). numba is used when it is
importable unless the environment sets ``MOERLAB_NO_NUMBA=1``. Tests and the
benchmark switch explicitly with :func:`set_backend` or :func:`using`.

Activation codes accepted by the expert kernels: ``0`` GeLU (tanh form),
``1`` ReLU.
"""
import contextlib
import os

import numpy as np

from . import _numpy_impl

try:
    from . import _numba_impl
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_impl = None

ACTIVATIONS = {"gelu": 0, "relu": 1}

_BACKENDS = {"numpy": _numpy_impl}
if _numba_impl is not None:
    _BACKENDS["numba"] = _numba_impl


def _default_backend():
    flag = os.environ.get("MOERLAB_NO_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes") or _numba_impl is None:
        return "numpy"
    return "numba"


_active = _default_backend()


def available_backends():
    return sorted(_BACKENDS)


def backend():
    """Name of the backend currently in use."""
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = name


@contextlib.contextmanager
def using(name):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _impl():
    return _BACKENDS[_active]


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b):
    a = _f64(a)
    b = _f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _impl().matmul(a, b)


def topk(values, k):
    """Indices of the ``k`` largest entries per row, largest first, ties to the lower index."""
    values = _f64(values)
    if not 1 <= k <= values.shape[1]:
        raise ValueError(f"k={k} out of range for {values.shape[1]} entries")
    return _impl().topk(values, int(k))


def expert_forward(U, sel, W1, b1, W2, b2, act):
    return _impl().expert_forward(
        _f64(U), np.ascontiguousarray(sel, dtype=np.int64),
        _f64(W1), _f64(b1), _f64(W2), _f64(b2), int(act),
    )


def expert_backward(U, sel, gsel, pre, hid, eout, dout, W1, W2, act):
    return _impl().expert_backward(
        _f64(U), np.ascontiguousarray(sel, dtype=np.int64), _f64(gsel),
        _f64(pre), _f64(hid), _f64(eout), _f64(dout), _f64(W1), _f64(W2), int(act),
    )


activate = _numpy_impl.activate
activate_grad = _numpy_impl.activate_grad
