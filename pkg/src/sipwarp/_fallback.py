"""Pure numpy versions of the compiled kernels in ``_core.pyx``."""

import numpy as np


def grouped_max_sq(P, group_ptr, hinge):
    P = np.asarray(P, dtype=np.float64)
    B, K = P.shape
    coef = np.zeros((B, K))
    ptr = np.asarray(group_ptr, dtype=np.intp)
    sizes = np.diff(ptr)
    starts = ptr[:-1][sizes > 0]  # reduceat misreads empty groups, and they contribute nothing
    if K == 0 or len(starts) == 0:
        return np.zeros(B), coef
    S = np.maximum(P, 0.0) if hinge else np.abs(P)
    gmax = np.maximum.reduceat(S, starts, axis=1)
    owner = np.repeat(np.arange(len(starts)), sizes[sizes > 0])
    hit = S == gmax[:, owner]
    if hinge:
        hit &= S > 0.0
    # lowest index attaining the group max
    cand = np.where(hit, np.arange(K)[None, :], K)
    first = np.minimum.reduceat(cand, starts, axis=1)
    rows, grp = np.nonzero(first < K)
    cols = first[rows, grp]
    coef[rows, cols] = P[rows, cols]
    return np.einsum("bg,bg->b", gmax, gmax), coef


def _rows_by_class(c, m):
    order = np.argsort(c, kind="stable")
    bounds = np.searchsorted(c[order], np.arange(m + 1))
    return [order[bounds[j]:bounds[j + 1]] for j in range(m)]


def two_column_project(Vt, Pv, Qv, c1, c2):
    B, m, _ = Vt.shape
    out = np.zeros((B, Pv.shape[0]))
    for coeffs, cls in ((Pv, c1), (Qv, c2)):
        for j, rows in enumerate(_rows_by_class(cls, m)):
            if rows.size:
                out[:, rows] += Vt[:, j, :] @ coeffs[rows].T
    return out


def two_column_adjoint(C, Pv, Qv, c1, c2, m):
    B = C.shape[0]
    out = np.zeros((B, m, Pv.shape[1]))
    for coeffs, cls in ((Pv, c1), (Qv, c2)):
        for j, rows in enumerate(_rows_by_class(cls, m)):
            if rows.size:
                out[:, j, :] += C[:, rows] @ coeffs[rows]
    return out
