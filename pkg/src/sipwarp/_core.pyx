# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the polar solver.

Every function here has a numpy twin in ``_fallback.py`` with the same
signature and the same results up to floating point summation order.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def grouped_max_sq(double[:, ::1] P, long[::1] group_ptr, bint hinge):
    """Sum over groups of the squared group maximum, plus the sparse coefficient matrix.

    For row b and group g the score of element i is |P[b, i]| (or P[b, i]
    when ``hinge``). The winner is the lowest index attaining the group max.
    ``coef[b, i]`` holds P[b, i] at winners and zero elsewhere, so the
    gradient of the total with respect to the projections is ``2 * coef``.
    In hinge mode a group whose max is not positive contributes nothing.
    """
    cdef Py_ssize_t B = P.shape[0], K = P.shape[1]
    cdef Py_ssize_t G = group_ptr.shape[0] - 1
    cdef Py_ssize_t b, g, i, best_i
    cdef double best, s, total
    out = np.zeros(B, dtype=np.float64)
    coef = np.zeros((B, K), dtype=np.float64)
    cdef double[::1] out_v = out
    cdef double[:, ::1] coef_v = coef
    with nogil:
        for b in range(B):
            total = 0.0
            for g in range(G):
                best_i = -1
                best = 0.0 if hinge else -1.0
                for i in range(group_ptr[g], group_ptr[g + 1]):
                    s = P[b, i] if hinge else fabs(P[b, i])
                    if s > best:
                        best = s
                        best_i = i
                if best_i >= 0:
                    total += best * best
                    coef_v[b, best_i] = P[b, best_i]
            out_v[b] = total
    return out, coef


def two_column_project(double[:, :, ::1] Vt, double[:, ::1] Pv, double[:, ::1] Qv,
                       long[::1] c1, long[::1] c2):
    """out[b, k] = <Pv[k], Vt[b, c1[k]]> + <Qv[k], Vt[b, c2[k]]>."""
    cdef Py_ssize_t B = Vt.shape[0], r = Vt.shape[2], K = Pv.shape[0]
    cdef Py_ssize_t b, k, t, u, w
    cdef double acc
    out = np.empty((B, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(B):
            for k in range(K):
                u = c1[k]
                w = c2[k]
                acc = 0.0
                for t in range(r):
                    acc = acc + Pv[k, t] * Vt[b, u, t] + Qv[k, t] * Vt[b, w, t]
                o[b, k] = acc
    return out


def two_column_adjoint(double[:, ::1] C, double[:, ::1] Pv, double[:, ::1] Qv,
                       long[::1] c1, long[::1] c2, Py_ssize_t m):
    """Adjoint of ``two_column_project``; zero coefficients are skipped."""
    cdef Py_ssize_t B = C.shape[0], K = C.shape[1], r = Pv.shape[1]
    cdef Py_ssize_t b, k, t, u, w
    cdef double cv
    out = np.zeros((B, m, r), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for k in range(K):
                cv = C[b, k]
                if cv == 0.0:
                    continue
                u = c1[k]
                w = c2[k]
                for t in range(r):
                    o[b, u, t] += cv * Pv[k, t]
                    o[b, w, t] += cv * Qv[k, t]
    return out
