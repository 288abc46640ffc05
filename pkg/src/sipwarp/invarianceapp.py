"""Transformation invariance on images: transforms, finite-difference directions, and the binary sanity tasks."""

from dataclasses import dataclass, field
import logging
import time

import numpy as np
from scipy import ndimage
from sklearn.svm import SVC

from .embed import batch_embed
from .kernelcore import build_basis, median_gamma, nystrom_points
from .linear import fit_binary, validation_split
from .polar import SolverOptions
from .rrmdual import DualOptions, evaluate_many, train_dual
from .seminorm import Mode, RegularizerSpec

log = logging.getLogger(__name__)

KINDS = ("shift_left", "shift_up", "rotate", "scale")
DEFAULT_AMOUNTS = {"shift_left": 2, "shift_up": 2, "rotate": 10.0, "scale": 0.1}


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    H, W = img.shape
    src = img[max(0, dy):H + min(0, dy), max(0, dx):W + min(0, dx)]
    out[max(0, -dy):max(0, -dy) + src.shape[0], max(0, -dx):max(0, -dx) + src.shape[1]] = src
    return out


def transform_image(img, kind, amount):
    """Shift (whole pixels, zero fill), rotate by degrees, or scale by 1 + amount about the center."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected an H x W image")
    if kind == "shift_left":
        out = _shift(img, 0, int(round(amount)))
    elif kind == "shift_up":
        out = _shift(img, int(round(amount)), 0)
    elif kind == "rotate":
        out = ndimage.rotate(img, amount, reshape=False, order=1, mode="constant", cval=0.0)
    elif kind == "scale":
        f = 1.0 + amount
        if not f > 0:
            raise ValueError("scale factor must be positive")
        c = (np.array(img.shape) - 1) / 2.0
        # output pixel o samples input at c + (o - c) / f
        out = ndimage.affine_transform(img, np.eye(2) / f, offset=c - c / f,
                                       order=1, mode="constant", cval=0.0)
    else:
        raise ValueError(f"unsupported transform {kind!r}; expected one of {KINDS}")
    return np.clip(out, 0.0, 1.0)


def transform_batch(images, kind, amount):
    return np.stack([transform_image(im, kind, amount) for im in images])


def finite_diff_invariance(x, kind, basis, amount=None):
    """k~ at T(x) minus k~ at x for the fixed-amount transform T."""
    amount = DEFAULT_AMOUNTS[kind] if amount is None else amount
    x = np.asarray(x, dtype=np.float64)
    tx = transform_image(x, kind, amount)
    K = nystrom_points(np.stack([tx.ravel(), x.ravel()]), basis)
    return K[0] - K[1]


def invariance_directions(images, basis, kinds=KINDS, amounts=None):
    """Rows k~_{T(x)} - k~_x for every image and transform, image-major."""
    amounts = {**DEFAULT_AMOUNTS, **(amounts or {})}
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(len(images), -1)
    base = nystrom_points(flat, basis)
    out = np.empty((len(images), len(kinds), basis.dim))
    for t, kind in enumerate(kinds):
        moved = transform_batch(images, kind, amounts[kind]).reshape(len(images), -1)
        out[:, t] = nystrom_points(moved, basis) - base
    return out.reshape(-1, basis.dim)


def invariance_spec(Z, mode, weight, per_image=None):
    """Invariance regularizer over image-major directions Z.

    SUM_SQ (Warping) sums the squares over every image and transform.
    MAX (Dual, Embed) takes one max over all directions, or with
    ``per_image`` the max over each image's transforms summed over images
    (GROUP_MAX, one group per image). ``weight`` multiplies R^2.
    """
    w = float(np.sqrt(weight))
    if Mode(mode) is Mode.SUM_SQ:
        return RegularizerSpec(Z, Mode.SUM_SQ, weight=w)
    if per_image is None:
        return RegularizerSpec(Z, Mode.MAX, weight=w)
    if len(Z) % per_image:
        raise ValueError("direction count is not a multiple of per_image")
    return RegularizerSpec(Z, Mode.GROUP_MAX, weight=w, groups=np.arange(0, len(Z) + 1, per_image))


def warp_matrix(Z, spec):
    """M = I + w^2 Z^T Z, so that the warped features are M^{-1} k~_x."""
    return np.eye(Z.shape[1]) + spec.weight**2 * (Z.T @ Z)


def penalized_quantity(F, Z):
    """Mean over rows f_n of F of max_t <f_n, z_{n,t}>^2, with Z image-major for the same images."""
    F = np.asarray(F)
    Zr = np.asarray(Z).reshape(len(F), -1, F.shape[1])
    return float(np.mean(np.max(np.einsum("nd,ntd->nt", F, Zr) ** 2, axis=1)))


@dataclass
class SanityConfig:
    """Table 1 protocol. Each method's strengths are picked on a held-out
    ``val_frac`` of the training split, then refit on all of it. Warping,
    Dual and Embed choose the invariance weight from ``weight_grid``
    jointly with their own strength; the default fixes it at 1."""

    tasks: tuple = ((4, 9), (2, 3))
    n_train: int = 1000
    n_test: int = 1000
    runs: int = 5
    seed: int = 0
    gamma_scale: float = 1.0
    val_frac: float = 0.2
    C_grid: tuple = (1.0, 10.0, 100.0)
    weight_grid: tuple = (1.0,)
    embed_l2_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3)
    dual_reg_grid: tuple = (1e-6, 1e-5, 1e-4)
    dual_iters: int = 60
    solver: SolverOptions = field(default_factory=SolverOptions)


def _split(labels, pair, n_train, n_test, rng):
    idx = np.flatnonzero(np.isin(labels, pair))
    if len(idx) < n_train + n_test:
        got = len(idx)
        n_train = n_test = got // 2
        log.warning("only %d images for %s; using %d/%d", got, pair, n_train, n_test)
    idx = rng.permutation(idx)
    return idx[:n_train], idx[n_train:n_train + n_test]


def _pick(grid, fit, score):
    """Grid value with the best validation score (first on ties), and that score."""
    best, arg = -np.inf, grid[0]
    for v in grid:
        acc = score(fit(v))
        if acc > best:
            best, arg = acc, v
    return arg, best


def _svc_pick(Ktr, ytr, fit, val, grid):
    def fit_c(C):
        return SVC(C=C, kernel="precomputed").fit(Ktr[np.ix_(fit, fit)], ytr[fit])

    return _pick(grid, fit_c, lambda clf: np.mean(clf.predict(Ktr[np.ix_(val, fit)]) == ytr[val]))


def _svc_test(Ktr, ytr, Kte, yte, C):
    clf = SVC(C=C, kernel="precomputed").fit(Ktr, ytr)
    return float(np.mean(clf.predict(Kte) == yte))


def run_task(images, labels, pair, cfg, rng):
    """Accuracies of SVM, Warping, Dual and Embed on one binary split."""
    tr, te = _split(labels, pair, cfg.n_train, cfg.n_test, rng)
    flat = images.reshape(len(images), -1)
    Xtr, Xte = flat[tr], flat[te]
    ytr = (labels[tr] == pair[1]).astype(np.int64)
    yte = (labels[te] == pair[1]).astype(np.int64)
    fit, val = validation_split(len(tr), cfg.val_frac, rng)
    basis = build_basis(Xtr, cfg.gamma_scale * median_gamma(Xtr))
    Ftr, Fte = nystrom_points(Xtr, basis), nystrom_points(Xte, basis)
    Z = invariance_directions(images[tr], basis)
    out, secs, chosen = {}, {}, {}

    t = time.perf_counter()
    K = Ftr @ Ftr.T
    chosen["SVM_C"], _ = _svc_pick(K, ytr, fit, val, cfg.C_grid)
    out["SVM"] = _svc_test(K, ytr, Fte @ Ftr.T, yte, chosen["SVM_C"])
    secs["SVM"] = time.perf_counter() - t

    t = time.perf_counter()
    best = -np.inf
    for wt in cfg.weight_grid:
        Minv_tr = np.linalg.solve(warp_matrix(Z, invariance_spec(Z, Mode.SUM_SQ, wt)), Ftr.T)  # M^{-1} k~_x
        C, acc = _svc_pick(Ftr @ Minv_tr, ytr, fit, val, cfg.C_grid)
        if acc > best:
            best, chosen["Warping_weight"], chosen["Warping_C"], keep = acc, wt, C, Minv_tr
    out["Warping"] = _svc_test(Ftr @ keep, ytr, Fte @ keep, yte, chosen["Warping_C"])
    secs["Warping"] = time.perf_counter() - t

    t = time.perf_counter()
    s = 2.0 * ytr - 1.0

    def fit_dual(spec, reg, idx=fit):
        dopts = DualOptions(reg=reg, max_iters=cfg.dual_iters, solver=cfg.solver)
        return train_dual(Xtr[idx], s[idx], "logistic", spec, basis, dopts, seed=cfg.seed)

    best = -np.inf
    for wt in cfg.weight_grid:
        spec = invariance_spec(Z, Mode.MAX, wt)
        reg, acc = _pick(cfg.dual_reg_grid, lambda r: fit_dual(spec, r),
                         lambda mdl: np.mean((evaluate_many(mdl, Xtr[val]) > 0) == ytr[val]))
        if acc > best:
            best, chosen["Dual_weight"], chosen["Dual_reg"] = acc, wt, reg
    model = fit_dual(invariance_spec(Z, Mode.MAX, chosen["Dual_weight"]), chosen["Dual_reg"], np.arange(len(tr)))
    out["Dual"] = float(np.mean((evaluate_many(model, Xte) > 0) == yte))
    secs["Dual"] = time.perf_counter() - t

    t = time.perf_counter()
    best = -np.inf
    for wt in cfg.weight_grid:
        Etr = batch_embed(Xtr, invariance_spec(Z, Mode.MAX, wt), basis, cfg.solver).features.T
        l2, acc = _pick(cfg.embed_l2_grid, lambda l2: fit_binary(Etr[fit], ytr[fit], l2, "logistic"),
                        lambda wb: np.mean(((Etr[val] @ wb[0] + wb[1]) > 0) == ytr[val]))
        if acc > best:
            best, chosen["Embed_weight"], chosen["Embed_l2"], keep = acc, wt, l2, Etr
    Etr = keep
    Ete = batch_embed(Xte, invariance_spec(Z, Mode.MAX, chosen["Embed_weight"]), basis, cfg.solver).features.T
    w, b = fit_binary(Etr, ytr, chosen["Embed_l2"], "logistic")
    out["Embed"] = float(np.mean(((Ete @ w + b) > 0) == yte))
    secs["Embed"] = time.perf_counter() - t
    Zte = invariance_directions(images[te], basis)

    diag = {
        "penalized_plain": penalized_quantity(Fte, Zte),
        "penalized_embed": penalized_quantity(Ete, Zte),
        "dual_degraded": bool(model.degraded),
        "chosen": chosen,
        "seconds": secs,
        "n_train": len(tr),
        "n_test": len(te),
    }
    return out, diag


METHODS = ("SVM", "Warping", "Dual", "Embed")


def run_sanity_tasks(images, labels, cfg=None):
    """Per-run accuracies and mean/std per (task, method)."""
    cfg = cfg or SanityConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    runs, diags = [], []
    for r in range(cfg.runs):
        for pair in cfg.tasks:
            acc, diag = run_task(images, labels, tuple(pair), cfg, rng)
            runs.append({"run": r, "task": f"{pair[0]}v{pair[1]}", **acc})
            diags.append({"run": r, "task": f"{pair[0]}v{pair[1]}", **diag})
            log.info("run %d task %s: %s", r, pair, acc)
    summary = {}
    for pair in cfg.tasks:
        name = f"{pair[0]}v{pair[1]}"
        rows = [x for x in runs if x["task"] == name]
        summary[name] = {m: (float(np.mean([x[m] for x in rows])), float(np.std([x[m] for x in rows])))
                         for m in METHODS}
    return {"runs": runs, "summary": summary, "diagnostics": diags}
