# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention kernels.

Same contract as ``mlattn._pykernels``: every array is float64 and
C-contiguous with a leading stream axis ``B`` (heads and/or samples).
Causal masking means key ``j`` is visible to query ``i`` iff ``j <= i``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def softmax_attention(const double[:, :, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, bint causal, double scale):
    cdef Py_ssize_t B = q.shape[0], n1 = q.shape[1], dk = q.shape[2]
    cdef Py_ssize_t n2 = k.shape[1], dv = v.shape[2]
    cdef Py_ssize_t b, i, j, c, lim
    cdef double s, mx, tot, w
    out_arr = np.zeros((B, n1, dv), dtype=np.float64)
    scores_arr = np.empty(max(n2, 1), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] sc = scores_arr
    with nogil:
        for b in range(B):
            for i in range(n1):
                lim = n2
                if causal and i + 1 < n2:
                    lim = i + 1
                mx = -1e308
                for j in range(lim):
                    s = 0.0
                    for c in range(dk):
                        s = s + q[b, i, c] * k[b, j, c]
                    s = s * scale
                    sc[j] = s
                    if s > mx:
                        mx = s
                tot = 0.0
                for j in range(lim):
                    w = exp(sc[j] - mx)
                    sc[j] = w
                    tot = tot + w
                for j in range(lim):
                    w = sc[j] / tot
                    for c in range(dv):
                        out[b, i, c] += w * v[b, j, c]
    return out_arr


def softmax_step(const double[:, ::1] q, const double[:, :, ::1] K,
                 const double[:, :, ::1] V, Py_ssize_t n, double scale):
    cdef Py_ssize_t B = q.shape[0], dk = q.shape[1], dv = V.shape[2]
    cdef Py_ssize_t b, j, c
    cdef double s, mx, tot, w
    out_arr = np.zeros((B, dv), dtype=np.float64)
    scores_arr = np.empty(max(n, 1), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] sc = scores_arr
    with nogil:
        for b in range(B):
            mx = -1e308
            for j in range(n):
                s = 0.0
                for c in range(dk):
                    s = s + q[b, c] * K[b, j, c]
                s = s * scale
                sc[j] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for j in range(n):
                w = exp(sc[j] - mx)
                sc[j] = w
                tot = tot + w
            for j in range(n):
                w = sc[j] / tot
                for c in range(dv):
                    out[b, c] += w * V[b, j, c]
    return out_arr


cdef inline void _accumulate(double[:, :, ::1] M, double[:, ::1] S,
                             const double[:, :, ::1] kf, const double[:, :, ::1] v,
                             Py_ssize_t b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t D = kf.shape[2], dv = v.shape[2], r, c
    cdef double x
    for r in range(D):
        x = kf[b, j, r]
        S[b, r] += x
        if x != 0.0:
            for c in range(dv):
                M[b, r, c] += x * v[b, j, c]


cdef inline void _query(const double[:] qrow, double[:, :, ::1] M, double[:, ::1] S,
                        double[:] orow, Py_ssize_t b, double eps) noexcept nogil:
    cdef Py_ssize_t D = M.shape[1], dv = M.shape[2], r, c
    cdef double den = 0.0, x
    for c in range(dv):
        orow[c] = 0.0
    for r in range(D):
        x = qrow[r]
        den = den + x * S[b, r]
        if x != 0.0:
            for c in range(dv):
                orow[c] += x * M[b, r, c]
    if den < eps:
        den = eps
    for c in range(dv):
        orow[c] = orow[c] / den


def linear_update(double[:, :, ::1] M, double[:, ::1] S,
                  const double[:, :, ::1] kf, const double[:, :, ::1] v):
    cdef Py_ssize_t B = kf.shape[0], k = kf.shape[1], b, j
    with nogil:
        for b in range(B):
            for j in range(k):
                _accumulate(M, S, kf, v, b, j)


def linear_query(const double[:, ::1] qf, double[:, :, ::1] M, double[:, ::1] S, double eps):
    cdef Py_ssize_t B = qf.shape[0], dv = M.shape[2], b
    out_arr = np.empty((B, dv), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            _query(qf[b], M, S, out[b], b, eps)
    return out_arr


def linear_attention(const double[:, :, ::1] qf, const double[:, :, ::1] kf,
                     const double[:, :, ::1] v, bint causal, double eps):
    cdef Py_ssize_t B = qf.shape[0], n1 = qf.shape[1], D = qf.shape[2]
    cdef Py_ssize_t n2 = kf.shape[1], dv = v.shape[2]
    cdef Py_ssize_t b, i, nxt
    out_arr = np.empty((B, n1, dv), dtype=np.float64)
    M_arr = np.zeros((B, D, dv), dtype=np.float64)
    S_arr = np.zeros((B, D), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] M = M_arr
    cdef double[:, ::1] S = S_arr
    with nogil:
        for b in range(B):
            nxt = 0
            if not causal:
                while nxt < n2:
                    _accumulate(M, S, kf, v, b, nxt)
                    nxt = nxt + 1
            for i in range(n1):
                if causal:
                    while nxt <= i and nxt < n2:
                        _accumulate(M, S, kf, v, b, nxt)
                        nxt = nxt + 1
                _query(qf[b, i], M, S, out[b, i], b, eps)
    return out_arr


def linear_naive_step(const double[:, ::1] qf, const double[:, :, ::1] KF,
                      const double[:, :, ::1] V, Py_ssize_t n, double eps):
    cdef Py_ssize_t B = qf.shape[0], D = qf.shape[1], dv = V.shape[2], b, j
    out_arr = np.empty((B, dv), dtype=np.float64)
    M_arr = np.zeros((B, D, dv), dtype=np.float64)
    S_arr = np.zeros((B, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] M = M_arr
    cdef double[:, ::1] S = S_arr
    with nogil:
        for b in range(B):
            for j in range(n):
                _accumulate(M, S, KF, V, b, j)
            _query(qf[b], M, S, out[b], b, eps)
    return out_arr
