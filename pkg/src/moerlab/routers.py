"""Router score functions with forward, top-k retention and analytic backward.

Every router starts from the linear logits ``s = W x + b`` (``W`` is M x d).
The score function then maps logits to dense gates:

* ``softmax``: max-shifted softmax over all M logits.
* ``sigmoid`` / ``tanh``: elementwise.
* ``kern``: ``gamma * scale_initial * relu(s / (||s||_2 + eps))``.
* ``kern_no_relu``: the same without the ReLU.
* ``kern_after_topk``: dense gates are the raw logits; the normalization,
  ReLU and scaling are applied to the k selected logits only.

Top-k keeps the k largest dense values (ties go to the lower index) and zeroes
the rest. Kern gates are never l1-rescaled after selection. Softmax and sigmoid
can optionally renormalize the survivors to sum to one (``renormalize``).

All functions accept a single input vector of shape ``(d,)`` or a batch of
shape ``(B, d)``; results keep the input's rank.
"""
import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import ContractViolation, kaiming_init, matmul


class RouterKind(str, enum.Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    KERN = "kern"
    KERN_NO_RELU = "kern_no_relu"
    KERN_AFTER_TOPK = "kern_after_topk"

    @property
    def is_kern(self):
        return self in (RouterKind.KERN, RouterKind.KERN_NO_RELU, RouterKind.KERN_AFTER_TOPK)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"kernnorelu": "kern_no_relu", "kernaftertopk": "kern_after_topk"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(
                f"unknown router kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


ALL_KINDS = tuple(RouterKind)


@dataclass
class RouterParams:
    W: np.ndarray
    b: np.ndarray
    kind: RouterKind
    gamma: np.ndarray = field(default_factory=lambda: np.array(1.0))
    eps: float = 1e-8
    scale_initial: float = 1.0
    renormalize: bool = False

    def __post_init__(self):
        self.kind = RouterKind.parse(self.kind)
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        self.gamma = np.array(self.gamma, dtype=np.float64).reshape(())
        if self.W.ndim != 2 or min(self.W.shape) < 1:
            raise ContractViolation(f"router weight must be M x d with M, d >= 1, got {self.W.shape}")
        if self.b.shape != (self.W.shape[0],):
            raise ContractViolation(f"router bias shape {self.b.shape} does not match M={self.W.shape[0]}")
        if not self.eps > 0:
            raise ContractViolation("eps must be positive")
        if self.renormalize and self.kind not in (RouterKind.SOFTMAX, RouterKind.SIGMOID):
            raise ContractViolation(
                f"renormalize_after_topk only applies to softmax/sigmoid routers, not {self.kind.value}"
            )

    @classmethod
    def init(cls, kind, num_experts, dim, rng, **kw):
        """Kaiming-initialized weight, zero bias, ``gamma = 1``."""
        return cls(kaiming_init(num_experts, dim, rng), np.zeros(num_experts), kind, **kw)

    @property
    def num_experts(self):
        return self.W.shape[0]

    @property
    def dim(self):
        return self.W.shape[1]

    def params(self):
        """Trainable arrays by name. ``gamma`` is trainable only for Kern routers."""
        out = {"W": self.W, "b": self.b}
        if self.kind.is_kern:
            out["gamma"] = self.gamma
        return out

    def copy(self):
        return RouterParams(self.W.copy(), self.b.copy(), self.kind, self.gamma.copy(),
                            self.eps, self.scale_initial, self.renormalize)


def param_count(params):
    """``M*d + M``, plus one for the Kern scale ``gamma``."""
    M, d = params.W.shape
    return M * d + M + (1 if params.kind.is_kern else 0)


@dataclass
class RouterForward:
    """Dense gates before top-k, with what backward needs."""

    kind: RouterKind
    dense: np.ndarray      # (B, M)
    logits: np.ndarray     # (B, M)
    inputs: np.ndarray     # (B, d)
    cache: dict
    single: bool = False

    @property
    def dense_gates(self):
        return self.dense[0] if self.single else self.dense


@dataclass
class GateOutput:
    kind: RouterKind
    dense: np.ndarray      # (B, M)
    selected_idx: np.ndarray  # (B, k), largest gate first
    sparse: np.ndarray     # (B, M)
    cache: dict = None
    single: bool = False

    @property
    def dense_gates(self):
        return self.dense[0] if self.single else self.dense

    @property
    def selected(self):
        return self.selected_idx[0] if self.single else self.selected_idx

    @property
    def sparse_gates(self):
        return self.sparse[0] if self.single else self.sparse

    @property
    def k(self):
        return self.selected_idx.shape[1]

    def mask(self):
        m = np.zeros_like(self.sparse)
        np.put_along_axis(m, self.selected_idx, 1.0, axis=1)
        return m


@dataclass
class RouterGrads:
    W: np.ndarray
    b: np.ndarray
    gamma: float
    x: np.ndarray

    def as_dict(self, kind):
        out = {"W": self.W, "b": self.b}
        if RouterKind.parse(kind).is_kern:
            out["gamma"] = np.array(self.gamma)
        return out


def _sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _l2_normalize(s, eps):
    norm = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    return s / (norm + eps), norm


def _l2_backward(s, norm, eps, v):
    """Gradient through ``s / (||s|| + eps)`` given upstream ``v`` (rowwise)."""
    den = norm + eps
    proj = np.sum(v * s, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    coupling = np.where(norm > 0, proj / (safe * den * den), 0.0)
    return v / den - s * coupling


def score_logits(params, S):
    """Dense gates for logits ``S`` of shape (B, M); returns ``(dense, cache)``."""
    kind = params.kind
    scale = params.gamma * params.scale_initial
    cache = {}
    if kind is RouterKind.SOFTMAX:
        z = np.exp(S - S.max(axis=1, keepdims=True))
        dense = z / z.sum(axis=1, keepdims=True)
    elif kind is RouterKind.SIGMOID:
        dense = _sigmoid(S)
    elif kind is RouterKind.TANH:
        dense = np.tanh(S)
    elif kind is RouterKind.KERN_AFTER_TOPK:
        dense = S.copy()
    else:
        sbar, norm = _l2_normalize(S, params.eps)
        cache["sbar"] = sbar
        cache["norm"] = norm
        if kind is RouterKind.KERN:
            r = np.maximum(sbar, 0.0)
            cache["r"] = r
            dense = scale * r
        else:
            dense = scale * sbar
    return dense, cache


def router_forward(params, x):
    """Logits and dense gates for one input (d,) or a batch (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise ContractViolation(f"router input must have length d={params.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("router input contains non-finite values")
    S = matmul(X, params.W.T) + params.b
    dense, cache = score_logits(params, S)
    return RouterForward(params.kind, dense, S, X, cache, single)


def _select(params, fwd, k):
    dense = fwd.dense
    sel = kernels.topk(dense, k)
    rows = np.arange(dense.shape[0])[:, None]
    sparse = np.zeros_like(dense)
    cache = dict(fwd.cache, logits=fwd.logits, inputs=fwd.inputs)
    if params.kind is RouterKind.KERN_AFTER_TOPK:
        sub = fwd.logits[rows, sel]
        sbar, norm = _l2_normalize(sub, params.eps)
        r = np.maximum(sbar, 0.0)
        sparse[rows, sel] = params.gamma * params.scale_initial * r
        cache.update(sub=sub, sub_norm=norm, sub_sbar=sbar, sub_r=r)
    elif params.renormalize:
        picked = dense[rows, sel]
        total = picked.sum(axis=1, keepdims=True)
        sparse[rows, sel] = picked / total
        cache["picked_sum"] = total
    else:
        sparse[rows, sel] = dense[rows, sel]
    return sel, sparse, cache


def top_k_select(dense, k, params=None):
    """Keep the k largest gates.

    ``dense`` is either a :class:`RouterForward` (with ``params`` supplying the
    router configuration) or a bare array of gate values, in which case plain
    value selection is performed and the result carries no backward cache.
    """
    if isinstance(dense, RouterForward):
        if params is None:
            raise ContractViolation("top_k_select on a RouterForward needs the router params")
        M = dense.dense.shape[1]
        if not 1 <= k <= M:
            raise ContractViolation(f"k={k} out of range 1..{M}")
        sel, sparse, cache = _select(params, dense, k)
        return GateOutput(dense.kind, dense.dense, sel, sparse, cache, dense.single)
    arr = np.asarray(dense, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if not 1 <= k <= arr.shape[1]:
        raise ContractViolation(f"k={k} out of range 1..{arr.shape[1]}")
    sel = kernels.topk(arr, k)
    sparse = np.zeros_like(arr)
    rows = np.arange(arr.shape[0])[:, None]
    sparse[rows, sel] = arr[rows, sel]
    return GateOutput(None, arr, sel, sparse, None, single)


def route(params, x, k):
    """``router_forward`` followed by ``top_k_select``."""
    return top_k_select(router_forward(params, x), k, params)


def router_backward(params, gate_out, upstream):
    """Gradients of a loss with respect to W, b, gamma and the router input.

    ``upstream`` is dL/d(sparse gates). Only its entries at selected positions
    matter: the selection itself is treated as a constant.
    """
    cache = gate_out.cache
    if cache is None:
        raise ContractViolation("gate output has no backward cache")
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if up.shape != gate_out.sparse.shape:
        raise ContractViolation(f"upstream shape {up.shape} does not match gates {gate_out.sparse.shape}")
    if not np.all(np.isfinite(up)):
        raise ContractViolation("upstream gradient contains non-finite values")

    kind = params.kind
    S = cache["logits"]
    X = cache["inputs"]
    dense = gate_out.dense
    sel = gate_out.selected_idx
    rows = np.arange(S.shape[0])[:, None]
    u = up * gate_out.mask()
    scale = params.gamma * params.scale_initial
    dgamma = 0.0

    if kind in (RouterKind.SOFTMAX, RouterKind.SIGMOID):
        if params.renormalize:
            # sparse_m = dense_m / sum_sel dense  ->  grad wrt dense on selected entries
            p = gate_out.sparse
            inner = np.sum(u * p, axis=1, keepdims=True)
            u = (u - inner) / cache["picked_sum"] * gate_out.mask()
        if kind is RouterKind.SOFTMAX:
            dS = dense * (u - np.sum(u * dense, axis=1, keepdims=True))
        else:
            dS = u * dense * (1.0 - dense)
    elif kind is RouterKind.TANH:
        dS = u * (1.0 - dense * dense)
    elif kind is RouterKind.KERN:
        dgamma = float(np.sum(u * params.scale_initial * cache["r"]))
        v = scale * u * (cache["sbar"] > 0)
        dS = _l2_backward(S, cache["norm"], params.eps, v)
    elif kind is RouterKind.KERN_NO_RELU:
        dgamma = float(np.sum(u * params.scale_initial * cache["sbar"]))
        dS = _l2_backward(S, cache["norm"], params.eps, scale * u)
    else:
        u_sel = u[rows, sel]
        dgamma = float(np.sum(u_sel * params.scale_initial * cache["sub_r"]))
        v = scale * u_sel * (cache["sub_sbar"] > 0)
        dS = np.zeros_like(S)
        dS[rows, sel] = _l2_backward(cache["sub"], cache["sub_norm"], params.eps, v)

    dW = matmul(dS.T, X)
    db = dS.sum(axis=0)
    dX = matmul(dS, params.W)
    if gate_out.single:
        dX = dX[0]
    return RouterGrads(dW, db, dgamma, dX)


def monte_carlo_scale_samples(d, k, num_samples, rng, chunk=8192):
    """Per-sample values ``1 / ||top_k(relu(z / ||z||))||_2`` for z ~ N(0, I_d).

    A draw whose top-k entries are all zero (every coordinate <= 0) would give
    infinity; it is discarded and replaced by the next draw.
    """
    if not 1 <= k <= d:
        raise ContractViolation(f"need 1 <= k <= d, got k={k}, d={d}")
    if num_samples < 1:
        raise ContractViolation("num_samples must be >= 1")
    out = []
    have = 0
    while have < num_samples:
        n = min(chunk, num_samples - have)
        z = rng.normal((n, d))
        y = np.maximum(z / np.linalg.norm(z, axis=1, keepdims=True), 0.0)
        top = -np.sort(-y, axis=1)[:, :k]
        ss = np.sum(top * top, axis=1)
        ok = ss > 0
        vals = 1.0 / np.sqrt(ss[ok])
        out.append(vals)
        have += vals.size
    return np.concatenate(out)[:num_samples]


def monte_carlo_scale_init(d, k, num_samples, rng):
    """Monte Carlo estimate of ``E[1 / ||top_k(relu(z / ||z||))||]`` in dimension d.

    Used as ``scale_initial`` with ``d`` set to the number of experts so the
    initial top-k gate vector has roughly unit norm.
    """
    return float(np.mean(monte_carlo_scale_samples(d, k, num_samples, rng)))


def routing_flops(kind, M, d, k=1):
    """Static per-token floating-point operation count of the router.

    Counting convention: one multiply, add, compare, divide, exp, tanh or
    sqrt is one operation; index bookkeeping is free.

    * projection: ``2*M*d`` (multiply-add per weight) ``+ M`` (bias)
    * softmax: max ``M``, subtract ``M``, exp ``M``, sum ``M``, divide ``M``
    * sigmoid: negate, exp, add, divide: ``4*M``
    * tanh: ``M``
    * kern: squares ``M``, sum ``M``, sqrt ``1``, add eps ``1``, divide ``M``,
      relu ``M``, gamma*scale ``1``, scale gates ``M`` -> ``5*M + 3``
    * kern_no_relu: ``4*M + 3``
    * kern_after_topk: the kern formula on ``k`` entries -> ``5*k + 3``
    * top-k selection: ``k*M`` comparisons, identical for every kind
    """
    kind = RouterKind.parse(kind)
    projection = 2 * M * d + M
    score = {
        RouterKind.SOFTMAX: 5 * M,
        RouterKind.SIGMOID: 4 * M,
        RouterKind.TANH: M,
        RouterKind.KERN: 5 * M + 3,
        RouterKind.KERN_NO_RELU: 4 * M + 3,
        RouterKind.KERN_AFTER_TOPK: 5 * k + 3,
    }[kind]
    selection = k * M
    return {"projection": projection, "score": score, "selection": selection,
            "total": projection + score + selection}


def gate_statistics(gate_out):
    """Fractions of exactly-zero and negative dense gates, and of zero selected gates."""
    dense = gate_out.dense
    mask = gate_out.mask() > 0
    sparse = gate_out.sparse
    return {
        "zero_gate_fraction": float(np.mean(dense == 0.0)),
        "negative_gate_fraction": float(np.mean(dense < 0.0)),
        "zero_selected_fraction": float(np.mean(sparse[mask] == 0.0)),
    }
