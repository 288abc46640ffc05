"""Structured multilabel prediction with implication and exclusion constraints.

Scores are s_y(x) = <V, k~_x e_y^T>. For each sampled x the penalty is

    max_{c -> p} [s_c - s_p]_+^2 + max_{a <-> b} [s_a + s_b]_+^2

and the regularizer averages it over the sample. Each (x, constraint) pair
is one two-column element; every sampled x contributes one implication
group and one exclusion group, all with the hinge.
"""

from dataclasses import dataclass, field, replace
import csv
from itertools import combinations
import logging

import numpy as np

from .kernelcore import nystrom_points
from .linear import fit_binary, fit_joint_binary
from .mixupapp import JointFeature, embed_joint_vectors
from .polar import SolverOptions
from .seminorm import Mode, RegularizerSpec, TwoColumnElements, empty_spec

log = logging.getLogger(__name__)


class HierarchyCycleError(ValueError):
    pass


@dataclass(frozen=True)
class LabelHierarchy:
    m: int
    implication_edges: tuple  # (child, parent)
    exclusion_pairs: tuple    # (a, b) with a < b

    @property
    def empty(self):
        return not self.implication_edges and not self.exclusion_pairs


def derive_constraints(parent_of, m=None):
    """Implication child -> parent for every edge, exclusion for every sibling pair."""
    parent_of = {int(c): int(p) for c, p in dict(parent_of).items()}
    for c, p in parent_of.items():
        if c == p:
            raise HierarchyCycleError(f"label {c} is its own parent")
    for start in parent_of:
        seen = {start}
        node = start
        while node in parent_of:
            node = parent_of[node]
            if node in seen:
                raise HierarchyCycleError(f"cycle through label {node}")
            seen.add(node)
    labels = set(parent_of) | set(parent_of.values())
    if m is None:
        m = max(labels) + 1 if labels else 0
    elif labels and max(labels) >= m:
        raise ValueError(f"label id {max(labels)} out of range for m={m}")
    impl = tuple(sorted(parent_of.items()))
    kids = {}
    for c, p in impl:
        kids.setdefault(p, []).append(c)
    excl = tuple(sorted(pair for sib in kids.values() for pair in combinations(sorted(sib), 2)))
    return LabelHierarchy(int(m), impl, excl)


def structured_penalty(scores, hierarchy):
    s = np.asarray(scores, dtype=np.float64).ravel()
    if len(s) != hierarchy.m:
        raise ValueError(f"expected {hierarchy.m} scores, got {len(s)}")
    total = 0.0
    if hierarchy.implication_edges:
        c, p = np.array(hierarchy.implication_edges).T
        total += float(np.max(np.maximum(s[c] - s[p], 0.0)) ** 2)
    if hierarchy.exclusion_pairs:
        a, b = np.array(hierarchy.exclusion_pairs).T
        total += float(np.max(np.maximum(s[a] + s[b], 0.0)) ** 2)
    return total


def constraint_spec(Ks, hierarchy, weight):
    """Hinge GROUP_MAX spec over the sampled embedded points Ks (rows).

    weight multiplies the averaged penalty, so each element carries
    sqrt(weight / n_samples).
    """
    Ks = np.atleast_2d(np.asarray(Ks, dtype=np.float64))
    n, r = Ks.shape
    m = hierarchy.m
    if n == 0 or hierarchy.empty or weight == 0:
        return empty_spec()
    P, Q, c1, c2, ptr = [], [], [], [], [0]
    for k in Ks:
        for edges, sign in ((hierarchy.implication_edges, -1.0), (hierarchy.exclusion_pairs, 1.0)):
            if not edges:
                continue
            e = np.asarray(edges, dtype=np.int64)
            P.append(np.tile(k, (len(e), 1)))
            Q.append(sign * np.tile(k, (len(e), 1)))
            c1.append(e[:, 0])
            c2.append(e[:, 1])
            ptr.append(ptr[-1] + len(e))
    el = TwoColumnElements(np.concatenate(P), np.concatenate(Q), np.concatenate(c1), np.concatenate(c2), m)
    return RegularizerSpec(el, Mode.GROUP_MAX, weight=float(np.sqrt(weight / n)),
                           groups=np.asarray(ptr, dtype=np.int64), hinge=True)


def embed_joint_ml(x, y, sample, hierarchy, weight, basis, opts=None):
    """Joint feature of (x, label y) under the structured penalty built on ``sample``."""
    spec = constraint_spec(nystrom_points(sample, basis), hierarchy, weight)
    F, _ = embed_joint_vectors(nystrom_points(np.ravel(x)[None, :], basis), [int(y)], spec,
                               hierarchy.m, opts)
    return JointFeature.from_flat(F[0], hierarchy.m)


def embed_all_labels(X, spec, basis, m, opts=None):
    """Joint features for every (x, label), shape (N, m, m*d)."""
    Kx = nystrom_points(X, basis)
    N = len(Kx)
    labels = np.tile(np.arange(m), N)
    F, _ = embed_joint_vectors(np.repeat(Kx, m, axis=0), labels, spec, m, opts)
    return F.reshape(N, m, -1)


def _with_bias(Phi, m):
    # a constant block per label gives each label its own bias, like the baseline
    eye = np.broadcast_to(np.eye(m), (len(Phi), m, m))
    return np.concatenate([Phi, eye], axis=2)


def labels_to_matrix(label_sets, m):
    T = np.zeros((len(label_sets), m), dtype=np.int64)
    for n, labs in enumerate(label_sets):
        for lab in labs:
            T[n, int(lab)] = 1
    return T


def matrix_to_labels(T):
    return [set(np.flatnonzero(row).tolist()) for row in np.asarray(T)]


@dataclass
class EmbedMLModel:
    basis: object
    spec: object
    m: int
    w: np.ndarray
    opts: SolverOptions = field(default_factory=SolverOptions)

    def features(self, X):
        return embed_all_labels(X, self.spec, self.basis, self.m, self.opts)

    def scores(self, X, Phi=None):
        Phi = _with_bias(self.features(X) if Phi is None else Phi, self.m)
        N, m, D = Phi.shape
        return (Phi.reshape(N * m, D) @ self.w).reshape(N, m)


@dataclass
class MLSVMModel:
    basis: object
    W: np.ndarray  # (d, m)
    b: np.ndarray  # (m,)

    def scores(self, X):
        return nystrom_points(X, self.basis) @ self.W + self.b


def predict_multilabel(model, X, scores=None):
    """Relevant labels per example: strictly positive score, no repair."""
    S = model.scores(X) if scores is None else np.asarray(scores)
    return matrix_to_labels(S > 0)


def count_violations(predictions, hierarchy):
    """Per-constraint counts of examples breaking it: {"implication": [...], "exclusion": [...]}."""
    impl = np.zeros(len(hierarchy.implication_edges), dtype=np.int64)
    excl = np.zeros(len(hierarchy.exclusion_pairs), dtype=np.int64)
    for pred in predictions:
        for k, (c, p) in enumerate(hierarchy.implication_edges):
            if c in pred and p not in pred:
                impl[k] += 1
        for k, (a, b) in enumerate(hierarchy.exclusion_pairs):
            if a in pred and b in pred:
                excl[k] += 1
    return {"implication": impl, "exclusion": excl}


def write_violations_csv(path, rows):
    """rows: iterable of (method, counts dict, hierarchy)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["constraint", "kind", "count", "method"])
        for method, counts, H in rows:
            for (c, p), k in zip(H.implication_edges, counts["implication"]):
                wr.writerow([f"{c}->{p}", "implication", int(k), method])
            for (a, b), k in zip(H.exclusion_pairs, counts["exclusion"]):
                wr.writerow([f"{a}<->{b}", "exclusion", int(k), method])


def labelwise_accuracy(pred, truth):
    """Fraction of (example, label) decisions that agree; both 0/1 matrices."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError("expected two 0/1 matrices of equal shape")
    return float(np.mean(pred == truth))


def mlsvm_baseline(X, T, basis, l2=1e-3, loss="hinge"):
    """One-vs-rest linear classifiers on plain Nyström features, blind to the hierarchy."""
    F = nystrom_points(X, basis)
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    W = np.zeros((F.shape[1], T.shape[1]))
    b = np.zeros(T.shape[1])
    for y in range(T.shape[1]):
        W[:, y], b[y] = fit_binary(F, T[:, y], l2, loss)
    return MLSVMModel(basis, W, b)


@dataclass
class MLOptions:
    weight: float = 10.0
    l2: float = 1e-3
    loss: str = "hinge"
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(max_iters=100))


def train_embed_ml(X, T, hierarchy, basis, opts=None, sample=None):
    """Constraint-aware joint features for every (x, label) plus one shared linear scorer.

    The constraint sample defaults to the training inputs. The scorer uses
    the baseline's loss and L2 with free per-label biases, so with no
    constraints it is the one-vs-rest baseline.
    """
    opts = opts or MLOptions()
    X = np.asarray(X, dtype=np.float64)
    sample = X if sample is None else sample
    spec = constraint_spec(nystrom_points(sample, basis), hierarchy, opts.weight)
    Phi = _with_bias(embed_all_labels(X, spec, basis, hierarchy.m, opts.solver), hierarchy.m)
    w = fit_joint_binary(Phi, T, opts.l2, opts.loss, free=hierarchy.m)
    return EmbedMLModel(basis, spec, hierarchy.m, w, opts.solver)


@dataclass
class Table3Config:
    n_train: int = 100
    n_test: int = 100
    runs: int = 10
    seed: int = 0
    m_labels: int = 15
    depth: int = 3
    noise: float = 0.1
    dim: int = 10
    gamma_scale: float = 1.0
    l2: float = 1e-3
    options: MLOptions = field(default_factory=MLOptions)


def run_table3(cfg=None, data=None):
    """ML-SVM vs Embed: label-wise accuracy and violation counts per run.

    Without ``data`` each run draws a fresh synthetic hierarchical dataset;
    accuracy is scored against the noise-free test labels. With a
    ``MultilabelData`` instance, runs resample train/test from it and score
    against its labels.
    """
    from .dataio import synth_hierarchical
    from .kernelcore import build_basis, median_gamma

    cfg = cfg or Table3Config()
    rng = np.random.default_rng(cfg.seed)
    runs = []
    for r in range(cfg.runs):
        if data is None:
            ds = synth_hierarchical(int(rng.integers(2**31)), cfg.m_labels, cfg.depth,
                                    cfg.n_train + cfg.n_test, cfg.noise, dim=cfg.dim)
            X, T, truth, H = ds.features, ds.labels, ds.clean_labels, ds.hierarchy
            tr = np.arange(cfg.n_train)
            te = np.arange(cfg.n_train, cfg.n_train + cfg.n_test)
        else:
            X, H = data.features, data.hierarchy
            T = truth = labels_to_matrix(data.labels, H.m)
            perm = rng.permutation(len(X))
            tr, te = perm[:cfg.n_train], perm[cfg.n_train:cfg.n_train + cfg.n_test]
        basis = build_basis(X[tr], cfg.gamma_scale * median_gamma(X[tr]))
        svm = mlsvm_baseline(X[tr], T[tr], basis, cfg.l2, cfg.options.loss)
        emb = train_embed_ml(X[tr], T[tr], H, basis, replace(cfg.options, l2=cfg.l2))
        S_svm = svm.scores(X[te])
        S_emb = emb.scores(X[te])
        row = {"run": r}
        for name, S in (("ML-SVM", S_svm), ("Embed", S_emb)):
            pred = (S > 0).astype(np.int64)
            v = count_violations(matrix_to_labels(pred), H)
            row[name] = labelwise_accuracy(pred, truth[te])
            row[f"{name}_implication_violations"] = int(v["implication"].sum())
            row[f"{name}_exclusion_violations"] = int(v["exclusion"].sum())
            row[f"{name}_violations"] = v
        log.info("table3 run %d: ML-SVM %.4f Embed %.4f", r, row["ML-SVM"], row["Embed"])
        runs.append(row)
    summary = {k: (float(np.mean([x[k] for x in runs])), float(np.std([x[k] for x in runs])))
               for k in ("ML-SVM", "Embed")}
    for k in ("ML-SVM", "Embed"):
        summary[f"{k}_exclusion_violations"] = int(sum(x[f"{k}_exclusion_violations"] for x in runs))
        summary[f"{k}_implication_violations"] = int(sum(x[f"{k}_implication_violations"] for x in runs))
    return {"runs": runs, "summary": summary, "hierarchy": H if data is not None else None}
