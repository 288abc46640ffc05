"""Mixup as an invariance: path directions, the joint embedding program, and baselines.

Joint features for (x, y) are d x m matrices. Internally they are stored
flattened from the transposed (m, d) layout so that each class column is a
contiguous block; ``JointFeature.matrix`` is the d x m view.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from .kernelcore import landmark_kernel, nystrom_points
from .linear import fit_joint_softmax, fit_softmax, joint_scores, one_hot, validation_split
from .polar import SolverOptions
from .embed import representers_from_vectors
from .seminorm import Mode, RegularizerSpec, TwoColumnElements, empty_spec

log = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class MixupPair:
    i: int
    j: int
    x_i: np.ndarray
    x_j: np.ndarray
    y_i: np.ndarray
    y_j: np.ndarray


@dataclass
class JointFeature:
    matrix: np.ndarray  # d x m

    @classmethod
    def from_flat(cls, flat, m):
        return cls(np.asarray(flat).reshape(m, -1).T.copy())

    def flat(self):
        return self.matrix.T.ravel()


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def interpolate_pair(pair, lam):
    _check_lambda(lam)
    x = lam * np.asarray(pair.x_i, dtype=np.float64) + (1 - lam) * np.asarray(pair.x_j, dtype=np.float64)
    y = lam * np.asarray(pair.y_i, dtype=np.float64) + (1 - lam) * np.asarray(pair.y_j, dtype=np.float64)
    return x, y


def embedded_path(Xi, Xj, lam, basis):
    """k~ at x = lam*xi + (1-lam)*xj and its derivative in lam, both as rows.

    d/dlam k(z, x) = k(z, x) * (-2 gamma) (x - z)^T (xi - xj).
    """
    Xi = np.atleast_2d(np.asarray(Xi, dtype=np.float64))
    Xj = np.atleast_2d(np.asarray(Xj, dtype=np.float64))
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (len(Xi),))
    Xh = lam[:, None] * Xi + (1 - lam)[:, None] * Xj
    Dl = Xi - Xj
    Kh = landmark_kernel(Xh, basis)
    along = np.einsum("ij,ij->i", Xh, Dl)[:, None] - Dl @ basis.landmarks.T
    dK = (-2.0 * basis.gamma) * Kh * along
    Pt = basis.projector.T
    return Kh @ Pt, dK @ Pt


def mixup_direction(pair, lam, basis):
    """Z = (d/dlam k~_x) y_lam^T + k~_x (y_i - y_j)^T as a d x m matrix."""
    _check_lambda(lam)
    k, dk = embedded_path(pair.x_i, pair.x_j, lam, basis)
    _, y = interpolate_pair(pair, lam)
    dy = np.asarray(pair.y_i, dtype=np.float64) - np.asarray(pair.y_j, dtype=np.float64)
    return np.outer(dk[0], y) + np.outer(k[0], dy)


def _violation(V, pair, lams, basis):
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    n = len(lams)
    k, dk = embedded_path(np.repeat(np.atleast_2d(pair.x_i), n, 0),
                          np.repeat(np.atleast_2d(pair.x_j), n, 0), lams, basis)
    yi = np.asarray(pair.y_i, dtype=np.float64)
    yj = np.asarray(pair.y_j, dtype=np.float64)
    Vyi, Vyj = V @ yi, V @ yj
    # <V, dk y^T + k dy^T> = dk.(V y) + k.(V dy)
    val = lams * (dk @ Vyi) + (1 - lams) * (dk @ Vyj) + k @ (Vyi - Vyj)
    return val * val


def max_lambda_violation(V, pair, basis, grid=21, xtol=1e-8):
    """Maximize <V, Z_lam>^2 over [0, 1]: uniform grid, then golden-section refinement.

    Every grid point that is a local maximum is refined inside its two
    neighbouring cells; the grid winner (lowest index on ties) is kept
    unless a refinement beats it.
    """
    V = np.asarray(V, dtype=np.float64)
    lams = np.linspace(0.0, 1.0, grid)
    vals = _violation(V, pair, lams, basis)
    best = int(np.argmax(vals))
    best_lam, best_val = float(lams[best]), float(vals[best])
    if best_val == 0.0:
        return best_lam, 0.0
    h = lams[1] - lams[0] if grid > 1 else 1.0
    left = np.r_[-np.inf, vals[:-1]]
    right = np.r_[vals[1:], -np.inf]
    peaks = np.flatnonzero((vals >= left) & (vals >= right))

    def f(t):
        return float(_violation(V, pair, [t], basis)[0])

    for k in peaks:
        lo, hi = max(0.0, lams[k] - h), min(1.0, lams[k] + h)
        a, b = lo, hi
        c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
        fc, fd = f(c), f(d)
        while b - a > xtol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = f(d)
        t = 0.5 * (a + b)
        ft = f(t)
        for cand, val in ((t, ft), (c, fc), (d, fd)):
            if val > best_val:
                best_lam, best_val = float(cand), float(val)
    return best_lam, best_val


# joint embedding program

@dataclass
class MixupFamily:
    """Invariance elements Z_{ij}(lam) for sampled pairs on a fixed lambda grid."""

    elements: TwoColumnElements
    groups: np.ndarray
    grid: np.ndarray
    n_pairs: int
    m: int


def build_family(Xi, Xj, ci, cj, m, basis, grid=21, chunk=4096):
    """One group per pair, one element per grid value of lambda."""
    lams = np.linspace(0.0, 1.0, grid)
    fam = build_family_at(Xi, Xj, ci, cj, m, basis, [lams] * len(np.atleast_2d(Xi)), chunk)
    fam.grid = lams
    return fam


def build_family_at(Xi, Xj, ci, cj, m, basis, lam_lists, chunk=4096):
    """One group per pair with elements at that pair's own lambda values."""
    Xi = np.atleast_2d(np.asarray(Xi, dtype=np.float64))
    Xj = np.atleast_2d(np.asarray(Xj, dtype=np.float64))
    ci = np.asarray(ci, dtype=np.int64)
    cj = np.asarray(cj, dtype=np.int64)
    sizes = np.array([len(l) for l in lam_lists], dtype=np.int64)
    if len(sizes) != len(Xi) or np.any(sizes == 0):
        raise ValueError("need a nonempty lambda list per pair")
    L = np.concatenate([np.asarray(l, dtype=np.float64) for l in lam_lists])
    rows = np.repeat(np.arange(len(Xi)), sizes)
    total, r = len(L), basis.dim
    P = np.empty((total, r))
    Q = np.empty((total, r))
    for lo in range(0, total, chunk):
        sl = slice(lo, min(lo + chunk, total))
        rr = rows[sl]
        k, dk = embedded_path(Xi[rr], Xj[rr], L[sl], basis)
        lam = L[sl][:, None]
        P[sl] = lam * dk + k
        Q[sl] = (1 - lam) * dk - k
    el = TwoColumnElements(P, Q, ci[rows], cj[rows], m)
    groups = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    return MixupFamily(el, groups, None, len(Xi), m)


def family_spec(family, alpha=1.0):
    if family is None or family.n_pairs == 0:
        return empty_spec(ridge=alpha)
    return RegularizerSpec(family.elements, Mode.GROUP_MAX, weight=1.0 / np.sqrt(family.n_pairs),
                           groups=family.groups, ridge=alpha)


def joint_constraints(Kx, labels, m):
    """Flattened constraint matrices k~_x e_y^T, one row per (x, y)."""
    Kx = np.atleast_2d(Kx)
    N, r = Kx.shape
    A = np.zeros((N, m, r))
    A[np.arange(N), np.asarray(labels, dtype=np.intp)] = Kx
    return A.reshape(N, m * r)


def embed_joint_vectors(Kx, labels, spec, m, opts=None, chunk=1000):
    """Rows of flattened joint features for each (k~_x, y) pair.

    With ridge alpha the ball is alpha ||V||^2 + R(V)^2. Features are reported
    for the equivalent ball ||V||^2 + R(V)^2 / alpha (same minimizer, J divided
    by alpha), so that without pairs the feature is k~_x e_y^T for every alpha.
    """
    A = joint_constraints(Kx, labels, m)
    out = np.empty_like(A)
    conv = 0
    for lo in range(0, len(A), chunk):
        F, res = representers_from_vectors(A[lo:lo + chunk], spec, opts)
        out[lo:lo + chunk] = spec.ridge * F
        conv += int(res.converged.sum())
    return out, conv


def embed_joint_all_classes(X, spec, basis, m, opts=None, chunk=1000):
    """Joint features for every class, shape (N, m, m*d)."""
    Kx = nystrom_points(X, basis)
    N = len(Kx)
    labels = np.tile(np.arange(m), N)
    F, conv = embed_joint_vectors(np.repeat(Kx, m, axis=0), labels, spec, m, opts, chunk)
    return F.reshape(N, m, -1), conv


def pairs_from_indices(X, y, m, I, J):
    Y = one_hot(y, m)
    return [MixupPair(int(i), int(j), X[i], X[j], Y[i], Y[j]) for i, j in zip(I, J)]


def embed_joint_mixup(x, y, pairs, alpha, basis, opts=None, m=None, grid=21,
                      refine_rounds=20, refine_rtol=1e-9):
    """Joint feature for (x, y) under the mixup regularizer built from ``pairs``.

    The max over lambda is first restricted to a uniform grid. Each
    refinement round then finds the most violated lambda per pair at the
    current solution (``max_lambda_violation``) and adds it as an element,
    until no pair is violated beyond the grid by more than ``refine_rtol``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if m is None:
        if not pairs:
            raise ValueError("class count m is needed when there are no pairs")
        m = len(pairs[0].y_i)
    kx = nystrom_points(np.ravel(x)[None, :], basis)
    if not pairs:
        F, _ = embed_joint_vectors(kx, [y], empty_spec(ridge=alpha), m, opts)
        return JointFeature.from_flat(F[0], m)
    Xi = np.stack([np.ravel(p.x_i) for p in pairs])
    Xj = np.stack([np.ravel(p.x_j) for p in pairs])
    ci = [int(np.argmax(p.y_i)) for p in pairs]
    cj = [int(np.argmax(p.y_j)) for p in pairs]
    lam_lists = [list(np.linspace(0.0, 1.0, grid)) for _ in pairs]
    A = joint_constraints(kx, [y], m)
    V0 = None
    for _ in range(refine_rounds + 1):
        spec = family_spec(build_family_at(Xi, Xj, ci, cj, m, basis, lam_lists), alpha)
        F, res = representers_from_vectors(A, spec, opts, V0)
        V0 = res.V
        Vmat = JointFeature.from_flat(res.V[0], m).matrix
        proj = spec.elements.project(res.V)[0]
        ptr = spec.groups
        added = False
        for k, pair in enumerate(pairs):
            lam, val = max_lambda_violation(Vmat, pair, basis, grid)
            if val > float(np.max(proj[ptr[k]:ptr[k + 1]] ** 2)) * (1 + refine_rtol):
                lam_lists[k].append(lam)
                added = True
        if not added:
            break
    return JointFeature.from_flat(spec.ridge * F[0], m)


# models

@dataclass
class VanillaMixupModel:
    basis: object
    W: np.ndarray
    beta: float
    l2: float

    def predict_proba(self, X):
        S = nystrom_points(X, self.basis) @ self.W
        S -= S.max(1, keepdims=True)
        P = np.exp(S)
        return P / P.sum(1, keepdims=True)

    def predict(self, X):
        return np.argmax(nystrom_points(X, self.basis) @ self.W, axis=1)


@dataclass
class EmbedMixupModel:
    basis: object
    spec: object
    m: int
    w: np.ndarray
    l2: float
    opts: SolverOptions = field(default_factory=SolverOptions)

    def features(self, X):
        return embed_joint_all_classes(X, self.spec, self.basis, self.m, self.opts)[0]

    def scores(self, X, Phi=None):
        Phi = self.features(X) if Phi is None else Phi
        return joint_scores(Phi, self.w)

    def predict_proba(self, X, Phi=None):
        S = self.scores(X, Phi)
        S -= S.max(1, keepdims=True)
        P = np.exp(S)
        return P / P.sum(1, keepdims=True)

    def predict(self, X, Phi=None):
        return np.argmax(self.scores(X, Phi), axis=1)


def sample_pairs(n, p, rng):
    """p index pairs drawn uniformly with replacement."""
    return rng.integers(0, n, size=p), rng.integers(0, n, size=p)


def mixed_inputs(X, Y, p, a, rng, lam_fixed=None, keep_originals=True):
    """Interpolated inputs and soft labels for p sampled pairs.

    The originals are kept in front of the mixed points unless
    ``keep_originals`` is false; with p = 0 only the originals remain.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if p == 0:
        return X, Y
    I, J = sample_pairs(len(X), p, rng)
    lam = np.full(p, lam_fixed) if lam_fixed is not None else rng.beta(a, a, size=p)
    Xm = lam[:, None] * X[I] + (1 - lam)[:, None] * X[J]
    Ym = lam[:, None] * Y[I] + (1 - lam)[:, None] * Y[J]
    if not keep_originals:
        return Xm, Ym
    return np.concatenate([X, Xm]), np.concatenate([Y, Ym])


@dataclass
class MixupOptions:
    beta_grid: tuple = (0.2, 0.5, 1.0, 2.0)
    l2_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    val_frac: float = 0.2
    alpha: float = 1.0
    grid: int = 11
    # bulk embedding runs a fixed small iteration budget; features settle within it at alpha = 1
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(polish=False, tol=1e-6, max_iters=10))
    max_iter: int = 500


def _accuracy(pred, y):
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


def train_vanilla_mixup(X, y, m, p, basis, opts=None, rng=None, lam_fixed=None):
    """Linear softmax on Nyström features of p interpolated points, Beta parameter picked on validation."""
    opts = opts or MixupOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=np.float64)
    Y = one_hot(y, m)
    fit, val = validation_split(len(X), opts.val_frac, rng)
    p_fit = int(round(p * len(fit) / len(X)))
    best = (-1.0, None, None)
    betas = opts.beta_grid if p > 0 else (opts.beta_grid[0],)
    for a in betas:
        Xm, Ym = mixed_inputs(X[fit], Y[fit], p_fit, a, np.random.default_rng(rng.integers(2**63)), lam_fixed)
        F = nystrom_points(Xm, basis)
        Fv = nystrom_points(X[val], basis)
        for l2 in opts.l2_grid:
            W = fit_softmax(F, Ym, l2, opts.max_iter)
            acc = _accuracy(np.argmax(Fv @ W, 1), np.asarray(y)[val])
            if acc > best[0]:
                best = (acc, a, l2)
    _, a, l2 = best
    Xm, Ym = mixed_inputs(X, Y, p, a, rng, lam_fixed)
    W = fit_softmax(nystrom_points(Xm, basis), Ym, l2, opts.max_iter)
    return VanillaMixupModel(basis, W, a, l2)


def train_embed_mixup(X, y, m, p, basis, opts=None, rng=None, pairs_idx=None):
    """Mixup-regularized joint features for the training set plus a softmax head."""
    opts = opts or MixupOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    I, J = pairs_idx if pairs_idx is not None else sample_pairs(len(X), p, rng)
    fam = build_family(X[I], X[J], y[I], y[J], m, basis, opts.grid) if len(I) else None
    spec = family_spec(fam, opts.alpha)
    Phi, _ = embed_joint_all_classes(X, spec, basis, m, opts.solver)
    Y = one_hot(y, m)
    fit, val = validation_split(len(X), opts.val_frac, rng)
    best = (-1.0, None)
    for l2 in opts.l2_grid:
        w = fit_joint_softmax(Phi[fit], Y[fit], l2, opts.max_iter)
        acc = _accuracy(np.argmax(joint_scores(Phi[val], w), 1), y[val])
        if acc > best[0]:
            best = (acc, l2)
    w = fit_joint_softmax(Phi, Y, best[1], opts.max_iter)
    return EmbedMixupModel(basis, spec, m, w, best[1], opts.solver)


def loss_vs_lambda_curve(model, pair, grid_step=0.1):
    """Cross-entropy of the model at interpolated points against interpolated labels."""
    steps = int(round(1.0 / grid_step))
    rows = []
    lams = np.linspace(0.0, 1.0, steps + 1)
    Xh = np.stack([interpolate_pair(pair, float(l))[0] for l in lams])
    P = model.predict_proba(Xh)
    for l, prob in zip(lams, P):
        _, yl = interpolate_pair(pair, float(l))
        rows.append((float(l), float(-(yl * np.log(np.maximum(prob, 1e-300))).sum())))
    return rows


def write_curve_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("lambda,loss\n")
        for lam, loss in rows:
            fh.write(f"{lam:.6g},{loss:.10g}\n")


@dataclass
class Table2Config:
    n: int = 500
    p: int = 500
    runs: int = 10
    n_test: int = 1000
    seed: int = 0
    gamma_scale: float = 2.0
    rank: int = 200
    options: MixupOptions = field(default_factory=MixupOptions)


def run_table2(images, labels, cfg=None, m=10):
    """Vanilla vs Embed over independent train/test resamples."""
    from .kernelcore import build_basis, median_gamma

    cfg = cfg or Table2Config()
    X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    y = np.asarray(labels, dtype=np.intp)
    if len(X) < cfg.n + cfg.n_test:
        raise ValueError(f"need {cfg.n + cfg.n_test} images, have {len(X)}")
    rng = np.random.default_rng(cfg.seed)
    runs = []
    for r in range(cfg.runs):
        perm = rng.permutation(len(X))
        tr, te = perm[:cfg.n], perm[cfg.n:cfg.n + cfg.n_test]
        basis = build_basis(X[tr], cfg.gamma_scale * median_gamma(X[tr]), rank=cfg.rank)
        van = train_vanilla_mixup(X[tr], y[tr], m, cfg.p, basis, cfg.options,
                                  np.random.default_rng(rng.integers(2**63)))
        emb = train_embed_mixup(X[tr], y[tr], m, cfg.p, basis, cfg.options,
                                np.random.default_rng(rng.integers(2**63)))
        Phi, _ = embed_joint_all_classes(X[te], emb.spec, basis, m, cfg.options.solver)
        row = {
            "run": r,
            "Vanilla": _accuracy(van.predict(X[te]), y[te]),
            "Embed": _accuracy(emb.predict(X[te], Phi), y[te]),
            "vanilla_beta": van.beta,
            "vanilla_l2": van.l2,
            "embed_l2": emb.l2,
        }
        log.info("table2 run %d: %s", r, row)
        runs.append(row)
    summary = {k: (float(np.mean([x[k] for x in runs])), float(np.std([x[k] for x in runs])))
               for k in ("Vanilla", "Embed")}
    return {"runs": runs, "summary": summary}
