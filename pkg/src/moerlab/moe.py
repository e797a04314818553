"""Sparse Mixture-of-Experts layer.

``out(x) = sum_{m in topk} g_m(x) * E_m(x)`` with two-layer expert FFNs
``E_m(x) = W2_m act(W1_m x + b1_m) + b2_m``. Only the selected experts are
evaluated. Expert weights are stored stacked: ``W1`` is (M, h_e, d), ``W2`` is
(M, d, h_e).
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import ContractViolation, kaiming_init
from .routers import ALL_KINDS, RouterParams, param_count, route, router_backward

ACTIVATIONS = ("gelu", "relu")


@dataclass
class ExpertParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"

    def __call__(self, x):
        pre = np.asarray(x) @ self.W1.T + self.b1
        return kernels.activate(pre, kernels.ACTIVATIONS[self.activation]) @ self.W2.T + self.b2


@dataclass
class MoeLayer:
    router: RouterParams
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    k: int
    activation: str = "gelu"

    def __post_init__(self):
        M = self.router.num_experts
        if self.W1.shape[0] != M or self.W2.shape[0] != M:
            raise ContractViolation(f"router has {M} experts but expert stacks have {self.W1.shape[0]}")
        if not 1 <= self.k <= M:
            raise ContractViolation(f"k={self.k} out of range 1..{M}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"activation must be one of {ACTIVATIONS}")
        h, d = self.W1.shape[1:]
        if d != self.router.dim or self.W2.shape[1:] != (d, h):
            raise ContractViolation("expert shapes are inconsistent with the router dimension")

    @classmethod
    def init(cls, kind, num_experts, dim, hidden, k, rng, activation="gelu", **router_kw):
        router = RouterParams.init(kind, num_experts, dim, rng, **router_kw)
        W1 = np.stack([kaiming_init(hidden, dim, rng) for _ in range(num_experts)])
        W2 = np.stack([kaiming_init(dim, hidden, rng) for _ in range(num_experts)])
        return cls(router, W1, np.zeros((num_experts, hidden)), W2, np.zeros((num_experts, dim)),
                   k, activation)

    @property
    def num_experts(self):
        return self.W1.shape[0]

    @property
    def dim(self):
        return self.W1.shape[2]

    @property
    def hidden(self):
        return self.W1.shape[1]

    def expert(self, m):
        return ExpertParams(self.W1[m], self.b1[m], self.W2[m], self.b2[m], self.activation)

    @property
    def experts(self):
        return [self.expert(m) for m in range(self.num_experts)]

    def params(self):
        out = {f"router.{name}": p for name, p in self.router.params().items()}
        out.update({"experts.W1": self.W1, "experts.b1": self.b1,
                    "experts.W2": self.W2, "experts.b2": self.b2})
        return out

    def expert_param_size(self):
        d, h = self.dim, self.hidden
        return 2 * d * h + h + d

    def param_count(self):
        return param_count(self.router) + self.num_experts * self.expert_param_size()

    def active_param_count(self):
        return param_count(self.router) + self.k * self.expert_param_size()

    def copy(self):
        return MoeLayer(self.router.copy(), self.W1.copy(), self.b1.copy(), self.W2.copy(),
                        self.b2.copy(), self.k, self.activation)


@dataclass
class MoeCache:
    gates: object
    inputs: np.ndarray
    pre: np.ndarray
    hid: np.ndarray
    eout: np.ndarray
    single: bool


@dataclass
class MoeGrads:
    params: dict
    x: np.ndarray


def moe_forward(layer, x):
    """Layer output for one input (d,) or a batch (B, d); returns ``(out, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    gates = route(layer.router, X, layer.k)
    sel = gates.selected_idx
    act = kernels.ACTIVATIONS[layer.activation]
    pre, hid, eout = kernels.expert_forward(X, sel, layer.W1, layer.b1, layer.W2, layer.b2, act)
    gsel = np.take_along_axis(gates.sparse, sel, axis=1)
    out = np.einsum("bk,bkd->bd", gsel, eout)
    cache = MoeCache(gates, X, pre, hid, eout, single)
    return (out[0] if single else out), cache


def moe_forward_dense(layer, x):
    """Reference path: evaluate every expert and weight by the masked gates."""
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    gates = route(layer.router, X, layer.k)
    out = np.zeros_like(X)
    for m in range(layer.num_experts):
        out += gates.sparse[:, m:m + 1] * layer.expert(m)(X)
    return out[0] if x.ndim == 1 else out


def moe_backward(layer, cache, upstream):
    """Gradients for router params, expert stacks and the input."""
    if cache is None:
        raise ContractViolation("moe_backward needs the cache from moe_forward")
    dout = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if dout.shape != cache.inputs.shape:
        raise ContractViolation(f"upstream shape {dout.shape} does not match input {cache.inputs.shape}")
    gates = cache.gates
    sel = gates.selected_idx
    gsel = np.take_along_axis(gates.sparse, sel, axis=1)
    act = kernels.ACTIVATIONS[layer.activation]
    dW1, db1, dW2, db2, dX, dgsel = kernels.expert_backward(
        cache.inputs, sel, gsel, cache.pre, cache.hid, cache.eout, dout, layer.W1, layer.W2, act
    )
    up = np.zeros_like(gates.sparse)
    np.put_along_axis(up, sel, dgsel, axis=1)
    rg = router_backward(layer.router, gates, up)
    dX = dX + np.atleast_2d(rg.x)
    grads = {f"router.{name}": g for name, g in rg.as_dict(layer.router.kind).items()}
    grads.update({"experts.W1": dW1, "experts.b1": db1, "experts.W2": dW2, "experts.b2": db2})
    return MoeGrads(grads, dX[0] if cache.single else dX)


def output_scale_probe(kind, M, k, d, h_e, samples, rng, layers=16, activation="gelu", **router_kw):
    """Monte Carlo estimate of E||MoE(x)||^2 at initialization.

    ``samples`` standard-normal inputs are spread over ``layers`` freshly
    Kaiming-initialized layers (the expectation runs over both).
    """
    if samples < 1:
        raise ContractViolation("samples must be >= 1")
    layers = max(1, min(layers, samples))
    counts = np.full(layers, samples // layers)
    counts[: samples % layers] += 1
    total = 0.0
    for n in counts:
        layer = MoeLayer.init(kind, M, d, h_e, k, rng, activation=activation, **router_kw)
        X = rng.normal((int(n), d))
        out, _ = moe_forward(layer, X)
        total += float(np.sum(out * out))
    return total / samples


_MAGIC = b"MOELAYER"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIII")


def save_checkpoint(layer, path):
    """Flat little-endian binary dump of a layer.

    Header: magic ``MOELAYER``, then uint32 version, M, d, h_e, k, router kind
    index, activation index, flags (bit 0: renormalize). Body: float64 eps,
    scale_initial, gamma, router W (M*d), router b (M), then for each expert in
    order W1 (h_e*d), b1 (h_e), W2 (d*h_e), b2 (d). Matrices are row-major.
    """
    r = layer.router
    header = _HEADER.pack(_MAGIC, _VERSION, layer.num_experts, layer.dim, layer.hidden, layer.k,
                          ALL_KINDS.index(r.kind), ACTIVATIONS.index(layer.activation),
                          int(bool(r.renormalize)))
    parts = [np.array([r.eps, r.scale_initial, float(r.gamma)]), r.W.ravel(), r.b]
    for m in range(layer.num_experts):
        parts += [layer.W1[m].ravel(), layer.b1[m], layer.W2[m].ravel(), layer.b2[m]]
    body = np.concatenate(parts).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, M, d, h, k, kind_idx, act_idx, flags = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a MoE layer checkpoint")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    per_expert = 2 * h * d + h + d
    if body.size != 3 + M * d + M + M * per_expert:
        raise ValueError(f"{path}: truncated or oversized checkpoint body")
    eps, scale_initial, gamma = body[:3]
    pos = 3
    W = body[pos:pos + M * d].reshape(M, d)
    pos += M * d
    b = body[pos:pos + M]
    pos += M
    experts = body[pos:].reshape(M, per_expert)
    W1 = experts[:, : h * d].reshape(M, h, d)
    b1 = experts[:, h * d: h * d + h]
    W2 = experts[:, h * d + h: 2 * h * d + h].reshape(M, d, h)
    b2 = experts[:, 2 * h * d + h:]
    router = RouterParams(W.copy(), b.copy(), ALL_KINDS[kind_idx], gamma, eps, scale_initial,
                          bool(flags & 1))
    return MoeLayer(router, W1.copy(), b1.copy(), W2.copy(), b2.copy(), k, ACTIVATIONS[act_idx])
