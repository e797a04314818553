"""Nadaraya-Watson regression and the MoE / FFN correspondences built on it.

``f(x) = sum_i K(x, x_i) y_i / sum_j K(x, x_j)``

Kernel families:

* ``gaussian``: ``exp(-||u - v||^2 / (2 sigma^2))``
* ``parametric_gaussian``: ``exp(-w ||u - v||^2 / 2)`` with trainable ``w > 0``
* ``exp_dot``: ``exp(<u, v>)``; NW with this kernel over the router rows is
  exactly a dense softmax-gated MoE.
"""
from dataclasses import dataclass

import numpy as np

from .kernels import activate
from .numerics import ContractViolation, matmul


class DegenerateNeighborhood(ValueError):
    """Every kernel weight vanished (or overflowed), so the estimate is undefined."""


@dataclass
class SampleSet:
    inputs: np.ndarray   # (N, d)
    targets: np.ndarray  # (N, p)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        t = np.asarray(self.targets, dtype=np.float64)
        self.targets = t[:, None] if t.ndim == 1 else t
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[0] < 1:
            raise ContractViolation(
                f"need N >= 1 matching inputs/targets, got {self.inputs.shape[0]} and {self.targets.shape[0]}"
            )

    @property
    def N(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class KernelSpec:
    family: str
    param: float = 1.0

    FAMILIES = ("gaussian", "parametric_gaussian", "exp_dot")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ContractViolation(f"unknown kernel family {self.family!r}")
        if self.family != "exp_dot" and not self.param > 0:
            raise ContractViolation(f"{self.family} kernel needs a positive parameter, got {self.param}")

    @classmethod
    def gaussian(cls, sigma):
        return cls("gaussian", sigma)

    @classmethod
    def parametric_gaussian(cls, w):
        return cls("parametric_gaussian", w)

    @classmethod
    def exp_dot(cls):
        return cls("exp_dot")

    def __call__(self, x, points):
        """Kernel values between one query ``x`` and each row of ``points``."""
        if self.family == "exp_dot":
            # overflow surfaces as an infinite weight sum in nw_weights
            with np.errstate(over="ignore"):
                return np.exp(points @ x)
        sq = np.sum((points - x) ** 2, axis=1)
        if self.family == "gaussian":
            return np.exp(-sq / (2.0 * self.param ** 2))
        return np.exp(-self.param * sq / 2.0)


def nw_weights(samples, kernel, x):
    k = kernel(np.asarray(x, dtype=np.float64), samples.inputs)
    total = k.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateNeighborhood(
            f"kernel weights sum to {total!r}; the query has no usable neighbourhood"
        )
    return k / total


def nw_predict(samples, kernel, x):
    """Kernel-weighted average of the sample targets at query ``x``."""
    out = nw_weights(samples, kernel, x) @ samples.targets
    return out


def _bandwidth_loss_grad(train, heldout, w):
    """Held-out MSE of the parametric-Gaussian estimator and its derivative in log w."""
    D = np.sum((heldout.inputs[:, None, :] - train.inputs[None, :, :]) ** 2, axis=2)
    logits = -0.5 * w * D
    # ratio of kernels is shift invariant, so normalize in log space
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    F = P @ train.targets
    dbar = np.sum(P * D, axis=1, keepdims=True)
    dF_dw = -0.5 * ((P * D) @ train.targets - dbar * F)
    resid = F - heldout.targets
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    dloss_dw = float(np.mean(np.sum(2.0 * resid * dF_dw, axis=1)))
    return loss, dloss_dw * w


def nw_bandwidth_fit(samples, heldout, steps, lr, w0=1.0, trace=None):
    """Fit the parametric-Gaussian bandwidth ``w`` by gradient descent on held-out MSE.

    The search runs over ``log w`` so ``w`` stays positive. If ``trace`` is a
    list, the held-out loss before every step (and after the last) is appended.
    """
    if not w0 > 0:
        raise ContractViolation("initial bandwidth must be positive")
    theta = np.log(w0)
    for _ in range(steps):
        loss, grad = _bandwidth_loss_grad(samples, heldout, np.exp(theta))
        if trace is not None:
            trace.append(loss)
        theta -= lr * grad
    if trace is not None:
        trace.append(_bandwidth_loss_grad(samples, heldout, np.exp(theta))[0])
    return float(np.exp(theta))


def bandwidth_heldout_loss(samples, heldout, w):
    return _bandwidth_loss_grad(samples, heldout, w)[0]


def make_bandwidth_task(rng, w_true=2.0, n_anchors=40, n_heldout=200, dim=2, noise=0.01):
    """Synthetic data whose regression function is NW with bandwidth ``w_true``.

    Returns ``(anchors, heldout)``: the anchors serve as the NW sample set and
    the held-out targets are the true estimator plus Gaussian noise, so the
    held-out loss is minimized near ``w_true``.
    """
    anchors = SampleSet(rng.normal((n_anchors, dim)), rng.normal((n_anchors, 1)))
    X = rng.normal((n_heldout, dim))
    kernel = KernelSpec.parametric_gaussian(w_true)
    Y = np.array([nw_predict(anchors, kernel, x) for x in X]) + noise * rng.normal((n_heldout, 1))
    return anchors, SampleSet(X, Y)


def softmax_router_as_nw(W_s, x, expert_outputs):
    """NW estimate with the router rows as sample inputs and expert outputs as targets.

    With the ``exp_dot`` kernel this equals a softmax-gated MoE that keeps all
    M experts and has no router bias.
    """
    samples = SampleSet(W_s, np.asarray(expert_outputs, dtype=np.float64))
    return nw_predict(samples, KernelSpec.exp_dot(), x)


_ACTS = {
    "identity": lambda a: a,
    "relu": lambda a: activate(a, 1),
    "gelu": lambda a: activate(a, 0),
    "tanh": np.tanh,
    "sigmoid": lambda a: 1.0 / (1.0 + np.exp(-a)),
    "exp": np.exp,
}


def _normalize(a, normalization):
    if normalization == "identity":
        return a
    if normalization == "l1":
        n = np.sum(np.abs(a))
    elif normalization == "l2":
        n = np.sqrt(np.sum(a * a))
    else:
        raise ContractViolation(f"unknown normalization {normalization!r}")
    return a / n if n > 0 else a


def ffn_kernel_paths(W_in, V, x, activation="relu", normalization="l2"):
    """The FFN output layer computed two ways.

    ``pipeline`` is ``V @ act(norm(W_in @ x))``. ``kernel_sum`` loops over the
    hidden units and adds ``act(norm(scores))_i * v_i`` column by column.
    """
    if activation not in _ACTS:
        raise ContractViolation(f"unknown activation {activation!r}")
    act = _ACTS[activation]
    x = np.asarray(x, dtype=np.float64)
    W_in = np.asarray(W_in, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)

    scores = matmul(W_in, x[:, None])[:, 0]
    pipeline = matmul(V, act(_normalize(scores, normalization))[:, None])[:, 0]

    row_scores = np.array([np.dot(w_i, x) for w_i in W_in])
    weights = act(_normalize(row_scores, normalization))
    kernel_sum = np.zeros(V.shape[0])
    for i in range(V.shape[1]):
        kernel_sum += weights[i] * V[:, i]
    return pipeline, kernel_sum


def ffn_as_kernel_sum(W_in, V, x, activation="relu", normalization="l2"):
    """FFN output layer as a kernel-weighted sum of value columns (pipeline result)."""
    return ffn_kernel_paths(W_in, V, x, activation, normalization)[0]
