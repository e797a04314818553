"""numba ``@njit`` versions of the hot loops.

No fastmath and no parallel: every reduction runs in a fixed order so a run is
reproducible bit for bit.
"""
import math

import numpy as np
from numba import njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


@njit(cache=True)
def matmul(a, b):
    n, inner = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(inner):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def topk(values, k):
    B, M = values.shape
    out = np.empty((B, k), dtype=np.int64)
    taken = np.zeros(M, dtype=np.bool_)
    for t in range(B):
        taken[:] = False
        for j in range(k):
            best = -1
            for m in range(M):
                if taken[m]:
                    continue
                # strict comparison: the lower index wins ties
                if best < 0 or values[t, m] > values[t, best]:
                    best = m
            taken[best] = True
            out[t, j] = best
    return out


@njit(cache=True)
def _act(x, act):
    if act == 1:
        return x if x > 0.0 else 0.0
    return 0.5 * x * (1.0 + math.tanh(GELU_C * (x + GELU_A * x * x * x)))


@njit(cache=True)
def _act_grad(x, act):
    if act == 1:
        return 1.0 if x > 0.0 else 0.0
    t = math.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


@njit(cache=True)
def expert_forward(U, sel, W1, b1, W2, b2, act):
    B, k = sel.shape
    h = W1.shape[1]
    d_in = W1.shape[2]
    d_out = W2.shape[1]
    pre = np.empty((B, k, h))
    hid = np.empty((B, k, h))
    eout = np.empty((B, k, d_out))
    for t in range(B):
        for j in range(k):
            m = sel[t, j]
            for i in range(h):
                acc = 0.0
                for p in range(d_in):
                    acc += W1[m, i, p] * U[t, p]
                acc += b1[m, i]
                pre[t, j, i] = acc
                hid[t, j, i] = _act(acc, act)
            for o in range(d_out):
                acc = 0.0
                for i in range(h):
                    acc += W2[m, o, i] * hid[t, j, i]
                eout[t, j, o] = acc + b2[m, o]
    return pre, hid, eout


@njit(cache=True)
def expert_backward(U, sel, gsel, pre, hid, eout, dout, W1, W2, act):
    B, k = sel.shape
    M, h, d_in = W1.shape
    d_out = W2.shape[1]
    dW1 = np.zeros_like(W1)
    db1 = np.zeros((M, h))
    dW2 = np.zeros_like(W2)
    db2 = np.zeros((M, d_out))
    dU = np.zeros_like(U)
    dgsel = np.empty((B, k))
    dE = np.empty(d_out)
    dpre = np.empty(h)
    for t in range(B):
        for j in range(k):
            m = sel[t, j]
            g = gsel[t, j]
            acc = 0.0
            for o in range(d_out):
                acc += dout[t, o] * eout[t, j, o]
                dE[o] = g * dout[t, o]
                db2[m, o] += dE[o]
            dgsel[t, j] = acc
            for o in range(d_out):
                for i in range(h):
                    dW2[m, o, i] += dE[o] * hid[t, j, i]
            for i in range(h):
                acc = 0.0
                for o in range(d_out):
                    acc += W2[m, o, i] * dE[o]
                dpre[i] = acc * _act_grad(pre[t, j, i], act)
                db1[m, i] += dpre[i]
            for i in range(h):
                for p in range(d_in):
                    dW1[m, i, p] += dpre[i] * U[t, p]
            for p in range(d_in):
                acc = 0.0
                for i in range(h):
                    acc += W1[m, i, p] * dpre[i]
                dU[t, p] += acc
    return dW1, db1, dW2, db2, dU, dgsel
