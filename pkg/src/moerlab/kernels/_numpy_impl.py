"""Pure-numpy versions of the hot loops.

Expert dispatch groups tokens by expert (one gathered batch per expert), which
is how most numpy MoE code is written. Accumulation into shared gradient
buffers happens expert by expert in index order, so results are deterministic.
"""
import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def matmul(a, b):
    # left-to-right accumulation over the inner index, identical to the
    # textbook triple loop (no BLAS, no FMA)
    n, inner = a.shape
    out = np.zeros((n, b.shape[1]))
    for p in range(inner):
        out += a[:, p, None] * b[None, p, :]
    return out


def topk(values, k):
    # stable sort keeps the lower index first among equal values
    return np.argsort(-values, axis=1, kind="stable")[:, :k].astype(np.int64)


def activate(pre, act):
    if act == 1:
        return np.maximum(pre, 0.0)
    inner = GELU_C * (pre + GELU_A * pre ** 3)
    return 0.5 * pre * (1.0 + np.tanh(inner))


def activate_grad(pre, act):
    if act == 1:
        return (pre > 0.0).astype(np.float64)
    t = np.tanh(GELU_C * (pre + GELU_A * pre ** 3))
    return 0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * pre * pre)


def expert_forward(U, sel, W1, b1, W2, b2, act):
    B, k = sel.shape
    h = W1.shape[1]
    d_out = W2.shape[1]
    pre = np.zeros((B, k, h))
    eout = np.zeros((B, k, d_out))
    for m in np.unique(sel):
        tok, slot = np.nonzero(sel == m)
        p = U[tok] @ W1[m].T + b1[m]
        pre[tok, slot] = p
        eout[tok, slot] = activate(p, act) @ W2[m].T + b2[m]
    hid = activate(pre, act)
    return pre, hid, eout


def expert_backward(U, sel, gsel, pre, hid, eout, dout, W1, W2, act):
    B, k = sel.shape
    dW1 = np.zeros_like(W1)
    db1 = np.zeros((W1.shape[0], W1.shape[1]))
    dW2 = np.zeros_like(W2)
    db2 = np.zeros((W2.shape[0], W2.shape[1]))
    dU = np.zeros_like(U)
    dgsel = np.einsum("bd,bkd->bk", dout, eout)
    for m in np.unique(sel):
        tok, slot = np.nonzero(sel == m)
        dE = gsel[tok, slot, None] * dout[tok]
        dW2[m] = dE.T @ hid[tok, slot]
        db2[m] = dE.sum(axis=0)
        dpre = (dE @ W2[m]) * activate_grad(pre[tok, slot], act)
        dW1[m] = dpre.T @ U[tok]
        db1[m] = dpre.sum(axis=0)
        np.add.at(dU, tok, dpre @ W1[m])
    return dW1, db1, dW2, db2, dU, dgsel
