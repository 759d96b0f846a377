"""Pure-Python (numpy) kernels; the fallback when ``_kernels`` is not compiled.

Shapes carry a leading stream axis ``B``. Causal means key ``j`` is visible
to query ``i`` iff ``j <= i``.
"""
import numpy as np


def _causal_mask(n1: int, n2: int) -> np.ndarray:
    return np.arange(n2)[None, :] > np.arange(n1)[:, None]


def softmax_attention(q, k, v, causal, scale):
    s = np.matmul(q, k.transpose(0, 2, 1)) * scale
    if causal:
        s = np.where(_causal_mask(q.shape[1], k.shape[1]), -np.inf, s)
    s = s - s.max(axis=2, keepdims=True)
    e = np.exp(s)
    e /= e.sum(axis=2, keepdims=True)
    return np.ascontiguousarray(np.matmul(e, v))


def softmax_step(q, K, V, n, scale):
    s = np.einsum("bd,btd->bt", q, K[:, :n]) * scale
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    e /= e.sum(axis=1, keepdims=True)
    return np.einsum("bt,bte->be", e, V[:, :n])


def linear_update(M, S, kf, v):
    M += np.einsum("bkd,bke->bde", kf, v)
    S += kf.sum(axis=1)


def linear_query(qf, M, S, eps):
    num = np.einsum("bd,bde->be", qf, M)
    den = np.maximum(np.einsum("bd,bd->b", qf, S), eps)
    return num / den[:, None]


def linear_attention(qf, kf, v, causal, eps):
    if not causal:
        M = np.einsum("bjd,bje->bde", kf, v)
        S = kf.sum(axis=1)
        num = np.matmul(qf, M)
        den = np.einsum("bid,bd->bi", qf, S)
        return np.ascontiguousarray(num / np.maximum(den, eps)[..., None])
    n1, n2 = qf.shape[1], kf.shape[1]
    B, D, dv = qf.shape[0], qf.shape[2], v.shape[2]
    out = np.empty((B, n1, dv))
    M = np.zeros((B, D, dv))
    S = np.zeros((B, D))
    nxt = 0
    for i in range(n1):
        if nxt <= i and nxt < n2:
            hi = min(i + 1, n2)
            linear_update(M, S, kf[:, nxt:hi], v[:, nxt:hi])
            nxt = hi
        out[:, i] = linear_query(qf[:, i], M, S, eps)
    return out


def linear_naive_step(qf, KF, V, n, eps):
    M = np.einsum("btd,bte->bde", KF[:, :n], V[:, :n])
    S = KF[:, :n].sum(axis=1)
    return linear_query(qf, M, S, eps)
