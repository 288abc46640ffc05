"""Polar-operator solves for the warped ball.

The min form is

    minimize J(v) = ridge * ||v||^2 + R(v)^2   subject to  <a, v> = 1,

solved by L-BFGS restricted to the hyperplane (every iterate is pushed
back through ``project_hyperplane``). Rows of a batch are independent
problems that share the iteration loop. Because R^2 is a max of
quadratics the objective has kinks; after the quasi-Newton phase an
active-set step solves the equality-constrained QP implied by the current
active elements exactly and keeps it when its KKT conditions check out.

The max form optimum follows by rescaling: g = v / sqrt(J(v)) lies on the
unit sphere of the ball and <a, g> = 1 / sqrt(J(v)) is the dual norm of a.
"""

from dataclasses import dataclass

import numpy as np

from .kernelcore import kernel_matrix, landmark_kernel
from .seminorm import Mode, reg_sq_and_coef

DEGENERATE_NORM = 1e-12


class DegenerateConstraint(ValueError):
    """The constraint vector is (numerically) zero."""


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iters: int = 200
    memory: int = 10
    armijo: float = 1e-4
    stall_rtol: float = 1e-15
    stall_iters: int = 5
    polish: bool = True
    polish_max_active: int = 64
    polish_every: tuple = (5, 10, 20, 40, 80, 160)


@dataclass
class PolarSolution:
    v_hat: np.ndarray
    g_circ: np.ndarray
    ball_norm_value: float
    dual_norm: float
    iterations: int
    converged: bool
    polished: bool = False


@dataclass
class PolarBatch:
    V: np.ndarray
    J: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    polished: np.ndarray
    degenerate: np.ndarray

    def g_circ(self):
        out = np.zeros_like(self.V)
        ok = self.J > 0
        out[ok] = self.V[ok] / np.sqrt(self.J[ok])[:, None]
        return out

    def dual_norms(self):
        out = np.zeros_like(self.J)
        ok = self.J > 0
        out[ok] = 1.0 / np.sqrt(self.J[ok])
        return out


def project_hyperplane(c, a):
    """Euclidean projection of c onto {x : <a, x> = 1}."""
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    aa = a @ a
    if not aa > 0:
        raise DegenerateConstraint("constraint vector a is zero")
    return c + ((1.0 - a @ c) / aa) * a


def _project_rows(C, A, AA):
    lam = (1.0 - np.einsum("ij,ij->i", A, C)) / AA
    return C + lam[:, None] * A


def objective(V, spec):
    """J and its (sub)gradient for each row of V."""
    V = np.atleast_2d(V)
    J = spec.ridge * np.einsum("ij,ij->i", V, V)
    G = 2.0 * spec.ridge * V
    if not spec.empty:
        s, coef = reg_sq_and_coef(V, spec)
        w2 = spec.weight**2
        J = J + w2 * s
        G = G + (2.0 * w2) * spec.elements.adjoint(coef)
    return J, G


def _tangent(G, A, AA):
    return G - (np.einsum("ij,ij->i", A, G) / AA)[:, None] * A


def _try_polish(rows, V, J, A, spec, opts, polished):
    hit = []
    for row in rows:
        res = _polish_row(V[row], A[row], spec, J[row], opts)
        if res is not None:
            V[row], J[row] = res
            polished[row] = True
            hit.append(row)
    return np.asarray(hit, dtype=np.intp)


def _lbfgs(A, spec, opts, V0, polished):
    B, D = A.shape
    AA = np.einsum("ij,ij->i", A, A)
    V = A / AA[:, None] if V0 is None else _project_rows(np.array(V0, dtype=np.float64), A, AA)
    J, G = objective(V, spec)
    Gp = _tangent(G, A, AA)
    iters = np.zeros(B, dtype=np.int64)
    converged = np.sqrt(np.einsum("ij,ij->i", Gp, Gp)) <= opts.tol
    live = ~converged
    if spec.empty:
        # v0 is the exact answer when R vanishes
        return V, J, iters, np.ones(B, dtype=bool)

    mem = max(1, opts.memory)
    S = np.zeros((mem, B, D))
    Y = np.zeros((mem, B, D))
    rho = np.zeros((mem, B))
    h0 = np.zeros(B)
    npairs = np.zeros(B, dtype=np.int64)
    stall = np.zeros(B, dtype=np.int64)
    slot = 0

    for it in range(opts.max_iters):
        rows = np.flatnonzero(live)
        if rows.size == 0:
            break
        q = Gp[rows].copy()
        order = [(slot - 1 - k) % mem for k in range(mem)]
        alph = []
        for k in order:
            a_k = rho[k, rows] * np.einsum("ij,ij->i", S[k, rows], q)
            q -= a_k[:, None] * Y[k, rows]
            alph.append(a_k)
        have = npairs[rows] > 0
        gnorm = np.sqrt(np.einsum("ij,ij->i", Gp[rows], Gp[rows]))
        scale = np.where(have, h0[rows], 1.0 / np.maximum(gnorm, 1e-300) * np.minimum(1.0, gnorm))
        q *= scale[:, None]
        for k, a_k in zip(reversed(order), reversed(alph)):
            b_k = rho[k, rows] * np.einsum("ij,ij->i", Y[k, rows], q)
            q += (a_k - b_k)[:, None] * S[k, rows]
        d = -_tangent(q, A[rows], AA[rows])
        slope = np.einsum("ij,ij->i", Gp[rows], d)
        bad = ~(slope < 0)
        if bad.any():
            # fall back to steepest descent and forget the curvature pairs
            d[bad] = -Gp[rows[bad]] * scale[bad, None]
            slope[bad] = np.einsum("ij,ij->i", Gp[rows[bad]], d[bad])
            rho[:, rows[bad]] = 0.0
            npairs[rows[bad]] = 0

        t = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        Vn = np.empty((rows.size, D))
        Jn = np.empty(rows.size)
        Gn = np.empty((rows.size, D))
        pending = np.arange(rows.size)
        for _ in range(60):
            if pending.size == 0:
                break
            r = rows[pending]
            trial = _project_rows(V[r] + t[pending, None] * d[pending], A[r], AA[r])
            Jt, Gt = objective(trial, spec)
            ok = Jt <= J[r] + opts.armijo * t[pending] * slope[pending]
            idx = pending[ok]
            Vn[idx], Jn[idx], Gn[idx] = trial[ok], Jt[ok], Gt[ok]
            accepted[idx] = True
            pending = pending[~ok]
            t[pending] *= 0.5
        # rows without an acceptable step have stalled
        live[rows[~accepted]] = False

        acc = rows[accepted]
        if acc.size == 0:
            continue
        Vn, Jn, Gn = Vn[accepted], Jn[accepted], Gn[accepted]
        Gpn = _tangent(Gn, A[acc], AA[acc])
        s = Vn - V[acc]
        y = Gpn - Gp[acc]
        sy = np.einsum("ij,ij->i", s, y)
        yy = np.einsum("ij,ij->i", y, y)
        good = sy > 1e-12 * np.sqrt(np.einsum("ij,ij->i", s, s) * yy)
        S[slot, acc] = s
        Y[slot, acc] = y
        rho[slot, acc] = np.where(good, 1.0 / np.where(good, sy, 1.0), 0.0)
        h0[acc] = np.where(good, sy / np.where(good, yy, 1.0), h0[acc])
        npairs[acc] += good
        slot = (slot + 1) % mem

        drop = J[acc] - Jn
        small = drop <= opts.stall_rtol * np.maximum(1.0, np.abs(Jn))
        stall[acc] = np.where(small, stall[acc] + 1, 0)
        V[acc], J[acc], Gp[acc] = Vn, Jn, Gpn
        iters[acc] = it + 1
        gn = np.sqrt(np.einsum("ij,ij->i", Gpn, Gpn))
        done = gn <= opts.tol
        converged[acc[done]] = True
        live[acc[done]] = False
        live[acc[stall[acc] >= opts.stall_iters]] = False
        if opts.polish and (it + 1) in opts.polish_every:
            hit = _try_polish(np.flatnonzero(live), V, J, A, spec, opts, polished)
            converged[hit] = True
            live[hit] = False
    if opts.polish:
        # gradient-converged rows are polished too: the exact QP answer is cheap when small
        rest = np.flatnonzero(~polished)
        hit = _try_polish(rest, V, J, A, spec, opts, polished)
        converged[hit] = True
    return V, J, iters, converged


def _equality_qp(H, gi, a, spec):
    """Solve the QP with the signed rows of H held tight; returns (v, eta, t_elem)."""
    w2 = spec.weight**2
    E = (gi[:, None] == gi[None, :]).astype(np.float64)
    M = H @ H.T + (spec.ridge / w2) * E
    Ha = H @ a
    try:
        z = np.linalg.solve(M, Ha)
    except np.linalg.LinAlgError:
        z = np.linalg.lstsq(M, Ha, rcond=None)[0]
    den = a @ a - Ha @ z
    if not den > 0:
        return None
    nu = 2.0 * spec.ridge / den
    eta = nu * z
    v = (nu * a - H.T @ eta) / (2.0 * spec.ridge)
    return v, eta, (E @ eta) / (2.0 * w2)


def _polish_row(v, a, spec, J_ref, opts, max_rounds=60):
    """Exact solve of the QP behind the kinked objective, started near v.

    In epigraph form the problem is min ridge*||v||^2 + w^2 sum_g t_g^2
    subject to s*<g_i, v> <= t_g for the elements of group g and
    <a, v> = 1. Holding a guessed set of constraints tight gives a linear
    KKT system, (H H^T + (ridge/w^2) E) eta = nu H a and
    v = (nu a - H^T eta) / (2 ridge) with E the same-group indicator. The
    guess is refined by dropping negative multipliers and adding violated
    constraints until the KKT conditions hold. Returns (v, J) or None.
    """
    w2 = spec.weight**2
    if w2 == 0 or spec.count == 0:
        return None
    ptr = spec.groups
    owner = spec.group_of()
    hinge = bool(spec.hinge)
    singleton = np.diff(ptr) == 1

    def scores(p):
        return np.maximum(p, 0.0) if hinge else np.abs(p)

    P = spec.elements.project(v[None, :])[0]
    S = scores(P)
    gmax = np.maximum.reduceat(S, ptr[:-1])
    scale = max(float(gmax.max()), 1e-300)
    act = S >= gmax[owner] - 1e-6 * scale
    if hinge:
        act &= gmax[owner] > 1e-9 * scale
    active = {int(i): (-1.0 if P[i] < 0 and not hinge else 1.0) for i in np.flatnonzero(act)}
    seen = set()
    single_steps = False
    for _ in range(max_rounds):
        key = frozenset(active.items())
        if key in seen:
            if single_steps:
                return None
            single_steps = True
            seen.clear()
        seen.add(key)
        if not active or len(active) > opts.polish_max_active:
            return None
        idx = np.fromiter(active.keys(), dtype=np.intp, count=len(active))
        sign = np.fromiter(active.values(), dtype=np.float64, count=len(active))
        gi = owner[idx]
        H = spec.elements.vectors(idx) * sign[:, None]
        sol = _equality_qp(H, gi, a, spec)
        if sol is None:
            return None
        vn, eta, t_el = sol
        free = singleton[gi] & (not hinge)
        etol = 1e-10 * max(1.0, float(np.abs(eta).max()))
        neg = np.flatnonzero((eta < -etol) & ~free)
        if neg.size:
            drop = neg if not single_steps else neg[np.argmin(eta[neg])][None]
            for j in drop:
                del active[int(idx[j])]
            continue
        t = np.zeros(len(ptr) - 1)
        t[gi] = np.abs(t_el)
        Pn = spec.elements.project(vn[None, :])[0]
        Sn = scores(Pn)
        viol = Sn - t[owner]
        vtol = 1e-10 * max(1.0, float(Sn.max()))
        viol[idx] = -np.inf
        bad = viol > vtol
        if not bad.any():
            gnew = np.maximum.reduceat(Sn, ptr[:-1])
            Jn = float(spec.ridge * (vn @ vn) + w2 * (gnew @ gnew))
            if Jn <= J_ref * (1 + 1e-9) + 1e-300:
                return vn, Jn
            return None
        # most violated element of each offending group
        cand = np.flatnonzero(bad)
        order = cand[np.argsort(-viol[cand])]
        _, first = np.unique(owner[order], return_index=True)
        add = order[first]
        if single_steps:
            add = order[:1]
        for i in add:
            active[int(i)] = -1.0 if (Pn[i] < 0 and not hinge) else 1.0
    return None


def solve_min_form_batch(A, spec, opts=None, V0=None):
    """Solve one min-form problem per row of A."""
    opts = opts or SolverOptions()
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B, D = A.shape
    spec.check_dim(D)
    norms = np.sqrt(np.einsum("ij,ij->i", A, A))
    degenerate = norms < DEGENERATE_NORM
    V = np.zeros((B, D))
    J = np.zeros(B)
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)
    pol = np.zeros(B, dtype=bool)
    ok = np.flatnonzero(~degenerate)
    if ok.size:
        V0k = None if V0 is None else np.atleast_2d(V0)[ok]
        pk = np.zeros(ok.size, dtype=bool)
        Vk, Jk, ik, ck = _lbfgs(A[ok], spec, opts, V0k, pk)
        pol[ok] = pk
        V[ok], J[ok], iters[ok], conv[ok] = Vk, Jk, ik, ck
    return PolarBatch(V, J, iters, conv, pol, degenerate)


def solve_min_form(a, spec, opts=None, v0=None):
    a = np.asarray(a, dtype=np.float64).ravel()
    if np.linalg.norm(a) < DEGENERATE_NORM:
        raise DegenerateConstraint("constraint vector a is (numerically) zero")
    res = solve_min_form_batch(a[None, :], spec, opts, None if v0 is None else v0[None, :])
    v = res.V[0]
    g, dn = flip_to_max_form(v, spec, J=res.J[0])
    return PolarSolution(v, g, float(res.J[0]), dn, int(res.iterations[0]),
                         bool(res.converged[0]), bool(res.polished[0]))


def flip_to_max_form(v_hat, spec, J=None):
    """Rescale the min-form solution onto the unit sphere of the ball."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if J is None:
        J = float(objective(v_hat[None, :], spec)[0][0])
    if not J > 0:
        raise DegenerateConstraint("J(v_hat) = 0; the constraint vector is degenerate")
    root = np.sqrt(J)
    return v_hat / root, float(1.0 / root)


def closed_form_warp(a, Z):
    """Minimizer of ||v||^2 + sum_i <v, z_i>^2 on <a, v> = 1."""
    a = np.asarray(a, dtype=np.float64).ravel()
    Z = np.asarray(Z, dtype=np.float64).reshape(-1, a.size)
    M = np.eye(a.size) + Z.T @ Z
    try:
        Minv_a = np.linalg.solve(M, a)
    except np.linalg.LinAlgError as exc:
        raise ValueError("warp matrix is singular") from exc
    den = a @ Minv_a
    if not den > 0:
        raise DegenerateConstraint("constraint vector a is zero")
    return Minv_a / den


def warped_kernel(x1, x2, Z, basis):
    """k(x1, x2) - z(x1)^T (I + K_z)^{-1} z(x2) for z_i = sum_l Z[i, l] k(landmark_l, .).

    Evaluated directly from kernel values, without the Nyström map.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    k12 = float(np.exp(-basis.gamma * np.sum((np.ravel(x1) - np.ravel(x2)) ** 2)))
    if Z.size == 0:
        return k12
    Kl = kernel_matrix(basis.landmarks, basis.landmarks, basis.cfg)
    Kz = Z @ Kl @ Z.T
    z1 = Z @ landmark_kernel(x1, basis)[0]
    z2 = Z @ landmark_kernel(x2, basis)[0]
    return k12 - z1 @ np.linalg.solve(np.eye(len(Z)) + Kz, z2)


__all__ = [
    "DegenerateConstraint", "Mode", "PolarBatch", "PolarSolution", "SolverOptions",
    "closed_form_warp", "flip_to_max_form", "objective", "project_hyperplane",
    "solve_min_form", "solve_min_form_batch", "warped_kernel",
]
