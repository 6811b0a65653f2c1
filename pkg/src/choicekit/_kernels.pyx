# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

SENTINEL = -1e30
cdef double _SENTINEL = -1e30


def masked_log_softmax(const double[:, ::1] util, const unsigned char[:, ::1] avail,
                       const cnp.int64_t[::1] session, const cnp.int64_t[::1] category,
                       Py_ssize_t n_categories):
    cdef Py_ssize_t B = util.shape[0], I = util.shape[1]
    cdef Py_ssize_t b, i, c, s
    cdef long long empty = 0
    out = np.empty((B, I), dtype=np.float64)
    cdef double[:, ::1] logp = out
    cdef double *top = <double *> malloc(n_categories * sizeof(double))
    cdef double *acc = <double *> malloc(n_categories * sizeof(double))
    if top == NULL or acc == NULL:
        free(top)
        free(acc)
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                s = session[b]
                for c in range(n_categories):
                    top[c] = -INFINITY
                    acc[c] = 0.0
                for i in range(I):
                    if avail[s, i]:
                        c = category[i]
                        if util[b, i] > top[c]:
                            top[c] = util[b, i]
                for i in range(I):
                    if avail[s, i]:
                        c = category[i]
                        acc[c] += exp(util[b, i] - top[c])
                for c in range(n_categories):
                    if top[c] == -INFINITY:
                        empty += 1
                    else:
                        acc[c] = top[c] + log(acc[c])
                for i in range(I):
                    if avail[s, i]:
                        logp[b, i] = util[b, i] - acc[category[i]]
                    else:
                        logp[b, i] = _SENTINEL
    finally:
        free(top)
        free(acc)
    return out, int(empty)


cdef long long _softmax_residual_single(const double[:, ::1] util,
                                        const unsigned char[:, ::1] avail,
                                        const cnp.int64_t[::1] session,
                                        const cnp.int64_t[::1] chosen,
                                        double[:, ::1] out, double[::1] chosen_lp) noexcept nogil:
    # single-category fast path: row pointers, no category indirection
    cdef Py_ssize_t B = util.shape[0], I = util.shape[1]
    cdef Py_ssize_t b, i, j
    cdef long long empty = 0
    cdef const double *u
    cdef const unsigned char *a
    cdef double *o
    cdef double top, acc, e, inv
    for b in range(B):
        u = &util[b, 0]
        a = &avail[session[b], 0]
        o = &out[b, 0]
        top = -INFINITY
        for i in range(I):
            if a[i] and u[i] > top:
                top = u[i]
        if top == -INFINITY:
            empty += 1
            for i in range(I):
                o[i] = 0.0
            chosen_lp[b] = _SENTINEL
            continue
        acc = 0.0
        for i in range(I):
            if a[i]:
                e = exp(u[i] - top)
                o[i] = e
                acc += e
            else:
                o[i] = 0.0
        inv = 1.0 / acc
        for i in range(I):
            o[i] *= inv
        j = chosen[b]
        chosen_lp[b] = u[j] - top - log(acc)
        o[j] -= 1.0
    return empty


def softmax_residual(const double[:, ::1] util, const unsigned char[:, ::1] avail,
                     const cnp.int64_t[::1] session, const cnp.int64_t[::1] category,
                     Py_ssize_t n_categories, const cnp.int64_t[::1] chosen):
    cdef Py_ssize_t B = util.shape[0], I = util.shape[1]
    cdef Py_ssize_t b, i, c, s, j
    cdef long long empty = 0
    res = np.empty((B, I), dtype=np.float64)
    lp = np.empty(B, dtype=np.float64)
    cdef double[:, ::1] out = res
    cdef double[::1] chosen_lp = lp
    cdef double e
    cdef double *top = <double *> malloc(n_categories * sizeof(double))
    cdef double *acc = <double *> malloc(n_categories * sizeof(double))
    if top == NULL or acc == NULL:
        free(top)
        free(acc)
        raise MemoryError()
    if n_categories == 1:
        free(top)
        free(acc)
        with nogil:
            empty = _softmax_residual_single(util, avail, session, chosen, out, chosen_lp)
        return res, lp, int(empty)
    try:
        with nogil:
            for b in range(B):
                s = session[b]
                for c in range(n_categories):
                    top[c] = -INFINITY
                    acc[c] = 0.0
                for i in range(I):
                    if avail[s, i]:
                        c = category[i]
                        if util[b, i] > top[c]:
                            top[c] = util[b, i]
                for i in range(I):
                    if avail[s, i]:
                        c = category[i]
                        e = exp(util[b, i] - top[c])
                        out[b, i] = e
                        acc[c] += e
                    else:
                        out[b, i] = 0.0
                for c in range(n_categories):
                    if top[c] == -INFINITY:
                        empty += 1
                        acc[c] = 1.0
                    else:
                        acc[c] = 1.0 / acc[c]
                j = chosen[b]
                c = category[j]
                for i in range(I):
                    if category[i] == c:
                        out[b, i] *= acc[c]
                    else:
                        out[b, i] = 0.0
                chosen_lp[b] = util[b, j] - top[c] + log(acc[c])
                out[b, j] -= 1.0
    finally:
        free(top)
        free(acc)
    return res, lp, int(empty)


def scatter_add_rows(const double[:, ::1] values, const cnp.int64_t[::1] index,
                     Py_ssize_t n_groups):
    cdef Py_ssize_t B = values.shape[0], J = values.shape[1]
    cdef Py_ssize_t b, j, g
    res = np.zeros((n_groups, J), dtype=np.float64)
    cdef double[:, ::1] out = res
    with nogil:
        for b in range(B):
            g = index[b]
            for j in range(J):
                out[g, j] += values[b, j]
    return res


def gather_dot3(const double[:, :, ::1] tensor, const double[:, ::1] coef,
                const cnp.int64_t[::1] session, const cnp.int64_t[::1] user):
    cdef Py_ssize_t B = session.shape[0], I = tensor.shape[1], K = tensor.shape[2]
    cdef Py_ssize_t b, i, k, s, u
    cdef double acc
    res = np.empty((B, I), dtype=np.float64)
    cdef double[:, ::1] out = res
    with nogil:
        for b in range(B):
            s = session[b]
            u = user[b]
            for i in range(I):
                acc = 0.0
                for k in range(K):
                    acc = acc + tensor[s, i, k] * coef[u, k]
                out[b, i] = acc
    return res


def gather_dot3_grad(const double[:, :, ::1] tensor, const double[:, ::1] weights,
                     const cnp.int64_t[::1] session, const cnp.int64_t[::1] user,
                     Py_ssize_t n_users):
    cdef Py_ssize_t B = session.shape[0], I = tensor.shape[1], K = tensor.shape[2]
    cdef Py_ssize_t b, i, k, s, u
    cdef double w
    res = np.zeros((n_users, K), dtype=np.float64)
    cdef double[:, ::1] out = res
    with nogil:
        for b in range(B):
            s = session[b]
            u = user[b]
            for i in range(I):
                w = weights[b, i]
                if w != 0.0:
                    for k in range(K):
                        out[u, k] += w * tensor[s, i, k]
    return res
