# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: zero-padded same convolutions and multi-head voting."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _conv_same(const double[:, :] x, const double[:, :] k, double[:, :] out) noexcept nogil:
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], w = k.shape[0]
    cdef Py_ssize_t h = (w - 1) // 2
    cdef Py_ssize_t t, c, j, s
    cdef double acc
    for t in range(T):
        for c in range(C):
            acc = 0.0
            for j in range(w):
                s = t + j - h
                if 0 <= s < T:
                    acc = acc + k[j, c] * x[s, c]
            out[t, c] = acc


def conv1d_same(signal, kernel):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = np.ascontiguousarray(signal, dtype=np.float64).reshape(-1, 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] k = np.ascontiguousarray(kernel, dtype=np.float64).reshape(-1, 1)
    out = np.empty((x.shape[0], 1), dtype=np.float64)
    _conv_same(x, k, out)
    return out[:, 0]


def depthwise_conv_fwd(x, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    out = np.empty_like(x)
    _conv_same(x, k, out)
    return out


def depthwise_conv_bwd(g, x, k):
    cdef const double[:, :] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, :] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :] kv = np.ascontiguousarray(k, dtype=np.float64)
    cdef Py_ssize_t T = xv.shape[0], C = xv.shape[1], w = kv.shape[0]
    cdef Py_ssize_t h = (w - 1) // 2
    gx_arr = np.zeros((T, C), dtype=np.float64)
    gk_arr = np.zeros((w, C), dtype=np.float64)
    cdef double[:, :] gx = gx_arr
    cdef double[:, :] gk = gk_arr
    cdef Py_ssize_t t, c, j, s
    with nogil:
        for t in range(T):
            for j in range(w):
                s = t + j - h
                if 0 <= s < T:
                    for c in range(C):
                        gk[j, c] += gv[t, c] * xv[s, c]
                        gx[s, c] += kv[j, c] * gv[t, c]
    return gx_arr, gk_arr


cdef void _topk(const double[:] x, Py_ssize_t k, char[:] taken, cnp.int64_t[:] out) noexcept nogil:
    # k passes of argmax over untaken entries; strict > keeps the lowest index on ties
    cdef Py_ssize_t n = x.shape[0], i, p, best
    cdef cnp.int64_t tmp
    for i in range(n):
        taken[i] = 0
    for p in range(k):
        best = -1
        for i in range(n):
            if not taken[i] and (best < 0 or x[i] > x[best]):
                best = i
        taken[best] = 1
    p = 0
    for i in range(n):
        if taken[i]:
            out[p] = i
            p += 1


def topk_indices(x, Py_ssize_t k):
    cdef const double[:] xv = np.ascontiguousarray(x, dtype=np.float64)
    taken = np.zeros(xv.shape[0], dtype=np.int8)
    out = np.empty(k, dtype=np.int64)
    _topk(xv, k, taken, out)
    return out


def mhv_select(attn, Py_ssize_t v, kernel, bint enhance):
    cdef const double[:, :] a = np.ascontiguousarray(attn, dtype=np.float64)
    cdef Py_ssize_t K = a.shape[0], T = a.shape[1], head, i
    taken_arr = np.zeros(T, dtype=np.int8)
    cdef char[:] taken = taken_arr
    votes_arr = np.zeros(T, dtype=np.int64)
    cdef cnp.int64_t[:] votes = votes_arr
    picked_arr = np.empty(v, dtype=np.int64)
    cdef cnp.int64_t[:] picked = picked_arr
    with nogil:
        for head in range(K):
            _topk(a[head], v, taken, picked)
            for i in range(v):
                votes[picked[i]] += 1
    scores = votes_arr.astype(np.float64)
    if enhance:
        enhanced = conv1d_same(scores, kernel)
    else:
        enhanced = scores
    cdef const double[:] ev = enhanced
    indices = np.empty(v, dtype=np.int64)
    cdef cnp.int64_t[:] iv = indices
    with nogil:
        _topk(ev, v, taken, iv)
    return votes_arr, enhanced, indices
