# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementation of the kernel hot path.

Mirrors _kernels_np: pairwise SE-Hessian tensors and assembled block
cross-covariances.  Kept loop-based to avoid the large broadcast temporaries
of the numpy route.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def pi_tensor(xa, xb, lengthscales):
    """See _kernels_np.pi_tensor."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa_c = np.ascontiguousarray(xa, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xb_c = np.ascontiguousarray(xb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ls = np.ascontiguousarray(lengthscales, dtype=np.float64)
    cdef Py_ssize_t n = xa_c.shape[0]
    cdef Py_ssize_t na = xa_c.shape[1]
    cdef Py_ssize_t nb = xb_c.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] k = np.empty((na, nb))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] d = np.empty((na, nb, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=4] pi = np.empty((na, nb, n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] vd = np.empty(n)
    cdef Py_ssize_t a, b, i, j
    cdef double sq, kv, di

    for i in range(n):
        v[i] = 1.0 / (ls[i] * ls[i])
    for a in range(na):
        for b in range(nb):
            sq = 0.0
            for i in range(n):
                di = xa_c[i, a] - xb_c[i, b]
                d[a, b, i] = di
                vd[i] = di * v[i]
                sq += di * vd[i]
            kv = exp(-0.5 * sq)
            k[a, b] = kv
            for i in range(n):
                for j in range(n):
                    pi[a, b, i, j] = -kv * vd[i] * vd[j]
                pi[a, b, i, i] += kv * v[i]
    return k, d, pi


def phs_cross(xa, xb, sa, sb, double sf2, lengthscales):
    """See _kernels_np.phs_cross."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa_c = np.ascontiguousarray(xa, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xb_c = np.ascontiguousarray(xb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] sa_c = np.ascontiguousarray(sa, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] sb_c = np.ascontiguousarray(sb, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ls = np.ascontiguousarray(lengthscales, dtype=np.float64)
    cdef Py_ssize_t n = xa_c.shape[0]
    cdef Py_ssize_t na = xa_c.shape[1]
    cdef Py_ssize_t nb = xb_c.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((na * n, nb * n))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] vd = np.empty(n)
    # small scratch blocks; n is the state dimension (tiny)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pi = np.empty((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tmp = np.empty((n, n))
    cdef Py_ssize_t a, b, i, j, l
    cdef double sq, kv, di, acc

    for i in range(n):
        v[i] = 1.0 / (ls[i] * ls[i])
    for a in range(na):
        for b in range(nb):
            sq = 0.0
            for i in range(n):
                di = xa_c[i, a] - xb_c[i, b]
                vd[i] = di * v[i]
                sq += di * vd[i]
            kv = sf2 * exp(-0.5 * sq)
            for i in range(n):
                for j in range(n):
                    pi[i, j] = -kv * vd[i] * vd[j]
                pi[i, i] += kv * v[i]
            # tmp = S_a @ pi
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for l in range(n):
                        acc += sa_c[a, i, l] * pi[l, j]
                    tmp[i, j] = acc
            # out block = tmp @ S_b^T
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for l in range(n):
                        acc += tmp[i, l] * sb_c[b, j, l]
                    out[a * n + i, b * n + j] = acc
    return out
