"""Regularized risk minimization over dual coefficients.

The model keeps f* = sum_j c_j G*_{x_j}. In embedded form u = sum_j c_j k~_{x_j},
the polar solve gives the unit-ball maximizer f° of <u, .>, ||f|| = <u, f°>,
and f(x) = ||f|| * <f°, k~_x>.

Gradients in c go through the maximizer of

    max <b, w>  s.t.  h_s(w) = w^T Q_s w <= 1   for every tight selection s,

where Q_s = ridge*I + w^2 sum_g g_{s(g)} g_{s(g)}^T picks one element per
group. Stationarity b = 2 sum_s lam_s Q_s w and the tight constraints give
a linear sensitivity system in (dw, dlam); constraints that are slack or
carry no multiplier are dropped from it.

When ties inside many groups make the selection product too large, the
ball is written in epigraph form instead, ridge*||w||^2 + w^2 sum_g u_g <= 1
with <g_t, w>^2 <= u_g for each element t of group g, which needs one
multiplier per tied element rather than one per combination.
"""

from dataclasses import dataclass, field
from itertools import product
import logging

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import minimize

from .kernelcore import nystrom_points
from .polar import DEGENERATE_NORM, SolverOptions, solve_min_form_batch
from .seminorm import Mode

log = logging.getLogger(__name__)

ACTIVE_TOL = 1e-7
FD_STEP = 1e-5
MAX_SELECTIONS = 256


@dataclass
class DualModel:
    coeffs: np.ndarray
    anchor_points: np.ndarray
    spec: object
    basis: object
    solver: SolverOptions = field(default_factory=SolverOptions)
    trace: list = field(default_factory=list)
    converged: bool = True
    degraded: bool = False
    _X: np.ndarray = field(default=None, repr=False)
    _state: tuple = field(default=None, repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).ravel()
        if len(self.coeffs) != len(self.anchor_points):
            raise ValueError("anchor count must match coefficient count")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")

    @property
    def X(self):
        """Embedded anchors as rows, (N, d)."""
        if self._X is None:
            self._X = nystrom_points(self.anchor_points, self.basis)
        return self._X

    def with_coeffs(self, c):
        return DualModel(np.array(c, dtype=np.float64), self.anchor_points, self.spec,
                         self.basis, self.solver, _X=self._X)


@dataclass
class _State:
    b: np.ndarray       # u = sum c_j k~_j
    w: np.ndarray       # unit-ball maximizer f°
    norm: float         # <b, f°>
    v_hat: np.ndarray


def _solve(model, X, c, v0=None):
    b = c @ X
    if np.linalg.norm(b) < DEGENERATE_NORM:
        return None
    res = solve_min_form_batch(b[None, :], model.spec, model.solver,
                               None if v0 is None else v0[None, :])
    v, J = res.V[0], res.J[0]
    w = v / np.sqrt(J)
    return _State(b, w, float(b @ w), v)


def _state(model):
    key = model.coeffs.tobytes()
    if model._state is not None and model._state[0] == key:
        return model._state[1]
    st = _solve(model, model.X, model.coeffs)
    model._state = (key, st)
    return st


def evaluate_many(model, points):
    st = _state(model)
    Xq = nystrom_points(points, model.basis)
    if st is None:
        return np.zeros(len(Xq))
    return st.norm * (Xq @ st.w)


def evaluate_f(model, x):
    return float(evaluate_many(model, np.asarray(x, dtype=np.float64)[None, ...])[0])


def _anchor_values(model, st):
    if st is None:
        return np.zeros(len(model.coeffs))
    return st.norm * (model.X @ st.w)


def _selections(w, spec):
    """Tight selections (one element per contributing group) at the unit-ball point w."""
    if spec.empty:
        return [()]
    P = spec.elements.project(w[None, :])[0]
    S = np.maximum(P, 0.0) if spec.hinge else np.abs(P)
    ptr = spec.groups
    w2 = spec.weight**2
    per_group = []
    for g in range(len(ptr) - 1):
        seg = S[ptr[g]:ptr[g + 1]]
        top = seg.max()
        if spec.hinge and w2 * top * top < ACTIVE_TOL:
            continue
        deficit = w2 * (top * top - seg * seg)
        per_group.append(ptr[g] + np.flatnonzero(deficit < ACTIVE_TOL))
    count = 1
    for grp in per_group:
        count *= len(grp)
        if count > MAX_SELECTIONS:
            return None
    sels = []
    gmax2 = sum(float(S[grp].max() ** 2) for grp in per_group)
    for combo in product(*per_group):
        combo = np.asarray(combo, dtype=np.intp)
        if w2 * (gmax2 - float(np.sum(S[combo] ** 2))) < ACTIVE_TOL:
            sels.append(combo)
    return sels


def _sensitivity(w, b, spec):
    """Build the sensitivity matrix; returns (Smat, D) or None when it cannot be formed."""
    D = len(w)
    sels = _selections(w, spec)
    if sels is None or not sels:
        return None
    ridge, w2 = spec.ridge, spec.weight**2
    Qw = np.empty((len(sels), D))
    for k, sel in enumerate(sels):
        q = ridge * w
        if len(sel):
            Gs = spec.elements.vectors(sel)
            q = q + w2 * (Gs.T @ (Gs @ w))
        Qw[k] = q
    lam, *_ = np.linalg.lstsq(2.0 * Qw.T, b, rcond=None)
    scale = max(float(np.abs(lam).max()), 1e-300)
    if np.any(lam < -1e-8 * scale):
        return None
    keep = lam > 1e-12 * scale
    sels = [s for s, k in zip(sels, keep) if k]
    lam, Qw = lam[keep], Qw[keep]
    n = len(sels)
    top = 2.0 * ridge * lam.sum() * np.eye(D)
    idx = np.concatenate([s for s in sels]) if n and len(sels[0]) else np.zeros(0, dtype=np.intp)
    if idx.size:
        wts = np.concatenate([np.full(len(s), l) for s, l in zip(sels, lam)])
        uniq, inv = np.unique(idx, return_inverse=True)
        acc = np.zeros(len(uniq))
        np.add.at(acc, inv, wts)
        Gu = spec.elements.vectors(uniq)
        top += 2.0 * w2 * (Gu.T * acc) @ Gu
    Smat = np.zeros((D + n, D + n))
    Smat[:D, :D] = top
    Smat[:D, D:] = 2.0 * Qw.T
    Smat[D:, :D] = 2.0 * lam[:, None] * Qw
    # h_s(w) - 1 on the diagonal; zero up to rounding for tight constraints
    hs = np.einsum("kd,d->k", Qw, w) - 1.0
    Smat[D:, D:] = np.diag(hs)
    return Smat, D


def _sensitivity_epigraph(w, b, spec):
    """Epigraph sensitivity system in (w, mu, u, lam); returns (Smat, D) or None."""
    D = len(w)
    ridge, w2 = spec.ridge, spec.weight**2
    P = spec.elements.project(w[None, :])[0]
    S = np.maximum(P, 0.0) if spec.hinge else np.abs(P)
    ptr = spec.groups
    act, owner = [], []
    for g in range(len(ptr) - 1):
        seg = S[ptr[g]:ptr[g + 1]]
        top = seg.max()
        if spec.hinge and w2 * top * top < ACTIVE_TOL:
            continue
        hit = ptr[g] + np.flatnonzero(w2 * (top * top - seg * seg) < ACTIVE_TOL)
        act.append(hit)
        owner.append(np.full(len(hit), len(owner)))
    if not act:
        return None
    act, owner = np.concatenate(act), np.concatenate(owner)
    G = int(owner[-1]) + 1
    Ga = spec.elements.vectors(act)
    p = Ga @ w
    # multipliers from b = 2 lam ridge w + 2 sum_t mu_t p_t g_t and sum_{t in g} mu_t = lam w^2
    A = np.zeros((D + G, len(act) + 1))
    A[:D, :-1] = 2.0 * (Ga * p[:, None]).T
    A[:D, -1] = 2.0 * ridge * w
    A[D + owner, np.arange(len(act))] = 1.0
    A[D:, -1] = -w2
    sol, *_ = np.linalg.lstsq(A, np.r_[b, np.zeros(G)], rcond=None)
    mu, lam = sol[:-1], sol[-1]
    scale = max(float(np.abs(sol).max()), 1e-300)
    if lam <= 0 or np.any(mu < -1e-8 * scale):
        return None
    keep = mu > 1e-12 * scale
    act, owner, Ga, p, mu = act[keep], owner[keep], Ga[keep], p[keep], mu[keep]
    if len(np.unique(owner)) != G:
        return None
    n = len(act)
    iw, im, iu, il = 0, D, D + n, D + n + G
    Smat = np.zeros((il + 1, il + 1))
    Smat[iw:im, iw:im] = 2.0 * lam * ridge * np.eye(D) + 2.0 * (Ga.T * mu) @ Ga
    Smat[iw:im, im:iu] = 2.0 * (Ga * p[:, None]).T
    Smat[iw:im, il] = 2.0 * ridge * w
    Smat[iu + owner, im + np.arange(n)] = 1.0
    Smat[iu:il, il] = -w2
    Smat[im:iu, iw:im] = 2.0 * Ga * p[:, None]
    Smat[im + np.arange(n), iu + owner] = -1.0
    Smat[il, iw:im] = 2.0 * ridge * w
    Smat[il, iu:il] = w2
    return Smat, D


def _fd_gradient(model, q):
    X = model.X
    c = model.coeffs
    out = np.zeros_like(c)
    st0 = _state(model)
    v0 = None if st0 is None else st0.v_hat
    for i in range(len(c)):
        vals = []
        for sgn in (1.0, -1.0):
            cc = c.copy()
            cc[i] += sgn * FD_STEP
            st = _solve(model, X, cc, v0)
            f = np.zeros(len(c)) if st is None else st.norm * (X @ st.w)
            vals.append(q @ f)
        out[i] = (vals[0] - vals[1]) / (2 * FD_STEP)
    return out


def dual_gradient_info(model, loss_grads):
    """Gradient of sum_j q_j f(x_j) in c, plus a flag set when finite differences were used."""
    q = np.asarray(loss_grads, dtype=np.float64).ravel()
    X = model.X
    if not np.any(q):
        return np.zeros_like(model.coeffs), False
    st = _state(model)
    if st is None:
        # f is not differentiable at c = 0; use the unregularized direction
        return X @ (X.T @ q), True
    r = q @ X
    ru, bu = float(r @ st.w), st.norm
    built = _sensitivity(st.w, st.b, model.spec)
    if built is None and model.spec.mode is Mode.GROUP_MAX:
        built = _sensitivity_epigraph(st.w, st.b, model.spec)
    if built is not None:
        Smat, D = built
        rhs = np.zeros(Smat.shape[0])
        rhs[:D] = ru * st.b + bu * r
        try:
            sol = _solve_checked(Smat.T, rhs)
            return ru * (X @ st.w) + X @ sol[:D], False
        except np.linalg.LinAlgError as exc:
            log.info("sensitivity solve failed (%s); using finite differences", exc)
    return _fd_gradient(model, q), True


def _solve_checked(A, rhs):
    """Solve A x = rhs, refusing systems with condition number above 1e14.

    Small systems use the exact condition number; larger ones the LU-based
    1-norm estimate, since an SVD per gradient would dominate the cost.
    """
    if len(A) <= 400:
        cond = np.linalg.cond(A)
    else:
        lu, piv, info = lapack.dgetrf(A)
        if info != 0:
            raise np.linalg.LinAlgError("singular sensitivity system")
        rcond, _ = lapack.dgecon(lu, np.abs(A).sum(0).max(), norm="1")
        cond = 1.0 / rcond if rcond > 0 else np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError("ill-conditioned sensitivity system")
    if len(A) <= 400:
        return np.linalg.solve(A, rhs)
    x, info = lapack.dgetrs(lu, piv, rhs)
    if info != 0 or not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("sensitivity solve failed")
    return x


def dual_gradient(model, loss_grads_at_points):
    g, degraded = dual_gradient_info(model, loss_grads_at_points)
    model.degraded = model.degraded or degraded
    return g


# losses take labels y in {-1, +1} (logistic) or reals (squared)

def _loss(kind, y, f):
    if kind == "logistic":
        z = -y * f
        val = np.logaddexp(0.0, z)
        grad = -y * np.exp(z - val)
        return val, grad
    if kind == "squared":
        d = f - y
        return 0.5 * d * d, d
    raise ValueError(f"unknown loss {kind!r}")


@dataclass
class DualOptions:
    reg: float = 1e-3
    max_iters: int = 200
    gtol: float = 1e-7
    restarts: int = 0
    restart_scale: float = 0.1
    solver: SolverOptions = field(default_factory=SolverOptions)


def _plain_fit(Xe, y, loss, reg, max_iters, gtol):
    """R = 0 fit. Solved in primal weights beta (f = Xe beta), which is far
    better conditioned than c; the optimum lies in the row space of Xe, so
    c = argmin ||Xe^T c - beta|| reproduces it."""
    N = len(y)

    def fun(beta):
        f = Xe @ beta
        val, g = _loss(loss, y, f)
        return val.mean() + reg * (beta @ beta), Xe.T @ (g / N) + 2 * reg * beta

    res = minimize(fun, np.zeros(Xe.shape[1]), jac=True, method="L-BFGS-B",
                   options={"maxiter": max(max_iters, 1000), "gtol": gtol * 1e-2})
    c, *_ = np.linalg.lstsq(Xe.T, res.x, rcond=None)
    return c, float(res.fun)


def _regularized_fit(model, Xe, y, loss, opts, c_start):
    N = len(y)
    warm = {"v": None}
    best = {"obj": np.inf, "c": np.array(c_start)}
    trace = []

    def fun(c):
        st = _solve(model, Xe, c, warm["v"])
        if st is None:
            return 1e300, np.zeros_like(c)
        warm["v"] = st.v_hat
        model.coeffs = np.array(c)
        model._state = (model.coeffs.tobytes(), st)
        f = st.norm * (Xe @ st.w)
        val, g = _loss(loss, y, f)
        obj = val.mean() + opts.reg * st.norm**2
        grad = dual_gradient(model, g / N) + 2.0 * opts.reg * st.norm * (Xe @ st.w)
        if obj < best["obj"]:
            best["obj"], best["c"] = obj, np.array(c)
        return obj, grad

    init_obj, _ = fun(np.array(c_start))
    trace.append(init_obj)
    res = minimize(fun, c_start, jac=True, method="L-BFGS-B",
                   callback=lambda xk: trace.append(best["obj"]),
                   options={"maxiter": opts.max_iters, "gtol": opts.gtol})
    return best["obj"], best["c"], trace, bool(res.success)


def train_dual(X, y, loss="logistic", spec=None, basis=None, opts=None, seed=0):
    """Minimize mean loss + reg * ||f||^2 over c, started from the R = 0 solution.

    With ``opts.restarts > 0`` further starts perturb that solution using
    ``seed``; the best final objective wins.
    """
    opts = opts or DualOptions()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) == 0:
        raise ValueError("empty training set")
    N = len(y)
    model = DualModel(np.zeros(N), X, spec, basis, opts.solver)
    Xe = model.X
    c0, plain_obj = _plain_fit(Xe, y, loss, opts.reg, opts.max_iters, opts.gtol)
    model.coeffs = c0
    if spec is None or spec.empty:
        model.trace = [plain_obj]
        return model

    rng = np.random.default_rng(seed)
    starts = [c0]
    scale = opts.restart_scale * np.linalg.norm(c0) / np.sqrt(N)
    starts += [c0 + scale * rng.standard_normal(N) for _ in range(opts.restarts)]
    best = None
    for c_start in starts:
        out = _regularized_fit(model, Xe, y, loss, opts, c_start)
        if best is None or out[0] < best[0]:
            best = out
    _, c, trace, ok = best
    model.coeffs = c
    model._state = None
    model.trace = trace
    model.converged = ok
    return model


def decision_values(model, points):
    return evaluate_many(model, points)


__all__ = [
    "DualModel", "DualOptions", "decision_values", "dual_gradient", "dual_gradient_info",
    "evaluate_f", "evaluate_many", "train_dual",
]
