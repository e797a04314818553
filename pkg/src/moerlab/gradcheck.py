"""Central finite-difference oracles for the hand-derived backward passes.

These only ever call forward code. Perturbed copies of the parameters are
built explicitly and pushed through the public forward functions.

Relative error of a gradient block is ``||a - n|| / max(||a||, ||n||, floor)``
with ``floor = 1e-4 * max(1, |L|)`` for loss value ``L``, so blocks whose true
gradient is (near) zero are judged by absolute error instead of amplifying
round-off. At step 1e-6 the central difference carries about ``|L| * 1e-10``
of cancellation noise per coordinate; a smaller floor turns that noise alone
into a failure.
"""
from dataclasses import dataclass, field

import numpy as np

from .moe import moe_backward, moe_forward
from .routers import RouterForward, router_backward, route, score_logits, top_k_select

STEP = 1e-6
FLOOR = 1e-4


def rel_error(analytic, numeric, floor=FLOOR):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


@dataclass
class GradCheck:
    errors: dict
    analytic: dict = field(repr=False, default_factory=dict)
    numeric: dict = field(repr=False, default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values())


def router_test_loss(sparse, weights):
    """``<weights, g> + ||g||^2 / 2`` per row; its gradient is ``weights + g``."""
    return sparse @ weights + 0.5 * np.sum(sparse * sparse, axis=-1)


def _router_losses(params, Ws, bs, Xs, k, weights):
    S = np.einsum("pmd,pd->pm", Ws, Xs) + bs
    dense, cache = score_logits(params, S)
    fwd = RouterForward(params.kind, dense, S, Xs, cache)
    return router_test_loss(top_k_select(fwd, k, params).sparse, weights)


def router_gradient_check(params, x, k, weights, h=STEP):
    """Compare ``router_backward`` against central differences in every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    gates = route(params, x, k)
    grads = router_backward(params, gates, weights + gates.sparse_gates)

    M, d = params.W.shape
    n_w, n_b = M * d, M
    P = n_w + n_b + d
    eye = np.eye(P) * h
    base_w = np.broadcast_to(params.W.ravel(), (P, n_w))
    base_b = np.broadcast_to(params.b, (P, n_b))
    base_x = np.broadcast_to(x, (P, d))
    plus = _router_losses(params, (base_w + eye[:, :n_w]).reshape(P, M, d),
                          base_b + eye[:, n_w:n_w + n_b], base_x + eye[:, n_w + n_b:], k, weights)
    minus = _router_losses(params, (base_w - eye[:, :n_w]).reshape(P, M, d),
                           base_b - eye[:, n_w:n_w + n_b], base_x - eye[:, n_w + n_b:], k, weights)
    numeric = (plus - minus) / (2 * h)
    num = {"W": numeric[:n_w].reshape(M, d), "b": numeric[n_w:n_w + n_b], "x": numeric[n_w + n_b:]}
    ana = {"W": grads.W, "b": grads.b, "x": grads.x}
    if params.kind.is_kern:
        losses = []
        for sign in (1.0, -1.0):
            p2 = params.copy()
            p2.gamma = params.gamma + sign * h
            losses.append(router_test_loss(route(p2, x, k).sparse_gates, weights))
        num["gamma"] = np.array((losses[0] - losses[1]) / (2 * h))
        ana["gamma"] = np.array(grads.gamma)
    floor = FLOOR * max(1.0, abs(float(router_test_loss(gates.sparse_gates, weights))))
    errors = {name: rel_error(ana[name], num[name], floor) for name in ana}
    return GradCheck(errors, ana, num)


def _moe_loss(layer, x):
    out, _ = moe_forward(layer, x)
    return 0.5 * float(out @ out)


def _perturbed(layer, name, delta):
    """Copy of ``layer`` with ``delta`` added to parameter ``name``."""
    twin = layer.copy()
    twin.params()[name][...] += delta
    return twin


def moe_gradient_check(layer, x, rng, h=STEP, directions=2, coords=6, full=False):
    """Check ``moe_backward`` on the loss ``||moe_forward(x)||^2 / 2``.

    With ``full=True`` every coordinate of every parameter and of ``x`` is
    differenced. Otherwise each parameter block (and ``x``) gets ``directions``
    random directional derivatives plus ``coords`` randomly chosen single
    coordinates, which keeps large layers cheap while still probing every block.
    """
    x = np.asarray(x, dtype=np.float64)
    out, cache = moe_forward(layer, x)
    grads = moe_backward(layer, cache, out)
    floor = FLOOR * max(1.0, 0.5 * float(np.sum(out * out)))
    ana = dict(grads.params, x=grads.x)
    blocks = dict(layer.params(), x=x)
    errors = {}
    numeric = {}
    analytic = {}

    def unit(base, i):
        e = np.zeros(base.size)
        e[i] = 1.0
        return e.reshape(base.shape)

    def loss_at(name, delta):
        if name == "x":
            return _moe_loss(layer, x + delta)
        return _moe_loss(_perturbed(layer, name, delta), x)

    for name, base in blocks.items():
        size = base.size
        if full:
            probes = [unit(base, i) for i in range(size)]
        else:
            picks = rng.integers(size, min(coords, size))
            probes = [unit(base, i) for i in picks]
            for _ in range(directions):
                v = rng.normal(size)
                probes.append((v / np.linalg.norm(v)).reshape(base.shape))
        num = np.array([(loss_at(name, h * p) - loss_at(name, -h * p)) / (2 * h) for p in probes])
        a = np.array([float(np.sum(ana[name] * p)) for p in probes])
        numeric[name] = num
        analytic[name] = a
        errors[name] = rel_error(a, num, floor)
    return GradCheck(errors, analytic, numeric)
