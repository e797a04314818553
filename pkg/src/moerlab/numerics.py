"""Dense numerics shared by every other module: RNG, matmul, init, Adam.

Everything is float64. Matrices are plain C-ordered numpy arrays.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ContractViolation(ValueError):
    """A precondition of a public operation was not met."""


def _splitmix(x):
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` (1-based) of a generator seeded with ``s`` is
    ``mix(s + i * 0x9E3779B97F4A7C15)``, the standard SplitMix64 output
    sequence, so any slice of the stream can be produced with vectorized
    uint64 arithmetic.

    * uniform: top 53 bits of a draw times 2**-53, in [0, 1).
    * normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``:
      ``r = sqrt(-2 log(1 - u1))``, giving ``r cos(2 pi u2)`` then
      ``r sin(2 pi u2)``. An odd request drops the final sine value.

    The integer stream is bit-exact everywhere; normals inherit the last-ulp
    behaviour of the platform's ``log``/``cos``/``sin``.
    """

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def _raw(self, n):
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        self.counter = (self.counter + n) & _MASK64
        return _splitmix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, size=None):
        n = int(np.prod(size)) if size is not None else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(size) if size is not None else float(u[0])

    def normal(self, size=None):
        n = int(np.prod(size)) if size is not None else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.reshape(size) if size is not None else float(z[0])

    def integers(self, high, size):
        """Uniform integers in ``[0, high)``."""
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def fork(self, label):
        """Independent child generator derived from this seed and an integer label."""
        base = np.array([self.seed ^ ((int(label) * 0xD1B54A32D192ED03) & _MASK64)], dtype=np.uint64)
        return Rng(int(_splitmix(base)[0]))


def matmul(a, b):
    """Matrix product with a fixed left-to-right reduction order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = kernels.matmul(a, b)
    if not np.all(np.isfinite(out)):
        raise ContractViolation("matmul produced non-finite entries")
    return out


def kaiming_init(rows, cols, rng):
    """``rows x cols`` matrix with entries drawn from N(0, 2 / cols)."""
    if rows < 1 or cols < 1:
        raise ContractViolation(f"kaiming_init needs positive shape, got ({rows}, {cols})")
    return rng.normal((rows, cols)) * np.sqrt(2.0 / cols)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    lr: float = 6e-4
    eps_opt: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper):
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param, grad, state):
    """One bias-corrected Adam update, applied in place.

    Returns ``(param, state)`` for convenience; both are the objects passed in.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ContractViolation(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps_opt)
    return param, state


@dataclass
class Adam:
    """Adam over a dict of named parameter arrays (updated in place)."""

    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps_opt: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = AdamState.zeros_like(
                    p, beta1=self.beta1, beta2=self.beta2, lr=self.lr, eps_opt=self.eps_opt
                )
                self.states[name] = st
            adam_step(p, grads[name], st)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
