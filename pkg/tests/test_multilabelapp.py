import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sipwarp.kernelcore import build_basis, nystrom_points
from sipwarp.mixupapp import JointFeature
from sipwarp.multilabelapp import (
    HierarchyCycleError,
    LabelHierarchy,
    MLOptions,
    MLSVMModel,
    constraint_spec,
    count_violations,
    derive_constraints,
    embed_joint_ml,
    labels_to_matrix,
    labelwise_accuracy,
    matrix_to_labels,
    mlsvm_baseline,
    predict_multilabel,
    structured_penalty,
    train_embed_ml,
    write_violations_csv,
)
from sipwarp.polar import SolverOptions

from oracles import min_form

TIGHT = SolverOptions(tol=1e-11, max_iters=3000)


def test_derive_root_with_two_children():
    H = derive_constraints({1: 0, 2: 0})
    assert H.implication_edges == ((1, 0), (2, 0))
    assert H.exclusion_pairs == ((1, 2),)
    assert H.m == 3


def test_derive_chain_has_no_exclusions():
    H = derive_constraints({0: 1, 1: 2})
    assert H.implication_edges == ((0, 1), (1, 2))
    assert H.exclusion_pairs == ()


def test_derive_empty_and_errors():
    H = derive_constraints({})
    assert H.empty and H.m == 0
    with pytest.raises(HierarchyCycleError):
        derive_constraints({0: 1, 1: 2, 2: 0})
    with pytest.raises(HierarchyCycleError):
        derive_constraints({3: 3})
    with pytest.raises(ValueError):
        derive_constraints({5: 0}, m=4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_derive_ignores_input_order(seed):
    rng = np.random.default_rng(seed)
    parent_of = {k: int(rng.integers(0, k)) for k in range(1, 9)}
    items = list(parent_of.items())
    rng.shuffle(items)
    assert derive_constraints(dict(items)) == derive_constraints(parent_of)


def test_structured_penalty_examples():
    H = LabelHierarchy(2, ((0, 1),), ())
    assert structured_penalty([-1.0, 1.0], H) == 0.0
    assert structured_penalty([1.0, -1.0], H) == pytest.approx(4.0)
    E = LabelHierarchy(2, (), ((0, 1),))
    assert structured_penalty([0.5, 0.5], E) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        structured_penalty([0.0], E)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0))
def test_structured_penalty_is_convex(seed, t):
    rng = np.random.default_rng(seed)
    H = derive_constraints({1: 0, 2: 0, 3: 1, 4: 1})
    a, b = rng.standard_normal(5) * 2, rng.standard_normal(5) * 2
    mid = structured_penalty(t * a + (1 - t) * b, H)
    assert mid <= t * structured_penalty(a, H) + (1 - t) * structured_penalty(b, H) + 1e-10


def test_constraint_spec_matches_penalty(rng):
    # w^2 R(V)^2 of the spec is weight times the sample mean of the penalty on scores <V, k e_y^T>
    X = rng.standard_normal((6, 3))
    basis = build_basis(X, 0.4)
    H = derive_constraints({1: 0, 2: 0, 3: 2})
    Ks = nystrom_points(X[:4], basis)
    spec = constraint_spec(Ks, H, 3.0)
    V = rng.standard_normal((basis.dim, H.m))
    proj = spec.elements.project(JointFeature(V).flat()[None])[0]
    terms = [np.max(np.maximum(proj[spec.groups[g]:spec.groups[g + 1]], 0)) ** 2
             for g in range(len(spec.groups) - 1)]
    expect = 3.0 * np.mean([structured_penalty(k @ V, H) for k in Ks])
    assert spec.weight**2 * np.sum(terms) == pytest.approx(expect, rel=1e-12)
    assert constraint_spec(Ks, LabelHierarchy(4, (), ()), 3.0).elements.count == 0


def test_embed_without_constraints_is_plain(rng):
    X = rng.standard_normal((6, 3))
    basis = build_basis(X, 0.4)
    f = embed_joint_ml(X[1], 2, X, LabelHierarchy(3, (), ()), 5.0, basis)
    expect = np.zeros((basis.dim, 3))
    expect[:, 2] = nystrom_points(X[1][None], basis)[0]
    assert np.allclose(f.matrix, expect, atol=1e-12)


def _ml_oracle(x, label, sample, H, weight, basis):
    m, d = H.m, basis.dim
    rows, groups = [], [0]
    for k in nystrom_points(sample, basis):
        for edges, sign in ((H.implication_edges, -1.0), (H.exclusion_pairs, 1.0)):
            for a, b in edges:
                r = np.zeros((m, d))
                r[a] += k
                r[b] += sign * k
                rows.append(r.ravel())
            if edges:
                groups.append(len(rows))
    a = JointFeature(np.outer(nystrom_points(x[None], basis)[0], np.eye(m)[label])).flat()
    w = np.sqrt(weight / len(sample))
    return min_form(a, np.array(rows), groups, weight=w, ridge=1.0, hinge=True), a


def test_embed_matches_conic_oracle(rng):
    X = rng.standard_normal((12, 3))
    basis = build_basis(X[:6], 0.5)
    assert basis.dim == 6
    H = LabelHierarchy(4, ((1, 0),), ((2, 3),))
    sample = X[6:11]
    # label 1 makes the implication 1 -> 0 bind at x itself
    f = embed_joint_ml(X[0], 1, sample, H, 4.0, basis, TIGHT)
    (v_ref, J_ref), a = _ml_oracle(X[0], 1, sample, H, 4.0, basis)
    coef = f.flat() @ a
    assert 1.0 / coef == pytest.approx(J_ref, abs=1e-6)
    assert np.abs(f.flat() - v_ref / J_ref).max() <= 1e-4 * np.abs(f.flat()).max()
    # pre-flip point v = iota * J lies on the hyperplane
    assert (f.flat() / coef) @ a == pytest.approx(1.0, abs=1e-8)


def test_prediction_threshold_is_strict():
    class Fixed:
        def __init__(self, S):
            self.S = np.asarray(S, dtype=float)

        def scores(self, X):
            return self.S

    assert predict_multilabel(Fixed([[-1, -2, -0.1]]), None) == [set()]
    assert predict_multilabel(Fixed([[1, 2, 0.1]]), None) == [{0, 1, 2}]
    assert predict_multilabel(Fixed([[0.0, 1e-12, -0.0]]), None) == [{1}]


def test_count_violations_examples(tmp_path):
    H = derive_constraints({1: 0, 2: 0})
    zero = count_violations([set(), set()], H)
    assert zero["implication"].tolist() == [0, 0] and zero["exclusion"].tolist() == [0]
    one = count_violations([{1}], H)
    assert one["implication"].tolist() == [1, 0]
    both = count_violations([{0, 1, 2}], H)
    assert both["exclusion"].tolist() == [1] and both["implication"].tolist() == [0, 0]
    path = tmp_path / "v.csv"
    write_violations_csv(path, [("Embed", both, H)])
    lines = path.read_text().splitlines()
    assert lines[0] == "constraint,kind,count,method"
    assert "1<->2,exclusion,1,Embed" in lines


def test_label_matrix_round_trip():
    sets = [{0, 2}, set(), {1}]
    T = labels_to_matrix(sets, 3)
    assert T.tolist() == [[1, 0, 1], [0, 0, 0], [0, 1, 0]]
    assert matrix_to_labels(T) == sets
    assert labelwise_accuracy(T, T) == 1.0
    assert labelwise_accuracy(np.zeros_like(T), T) == pytest.approx(6 / 9)
    with pytest.raises(ValueError):
        labelwise_accuracy(T[:2], T)


def test_mlsvm_separable_single_label(rng):
    X = np.r_[rng.standard_normal((15, 2)) + 3, rng.standard_normal((15, 2)) - 3]
    t = np.r_[np.ones(15), np.zeros(15)]
    basis = build_basis(X, 0.2)
    model = mlsvm_baseline(X, t, basis, l2=1e-4)
    assert isinstance(model, MLSVMModel)
    assert np.array_equal((model.scores(X)[:, 0] > 0).astype(int), t.astype(int))


def test_mlsvm_is_blind_to_hierarchy(rng):
    # the baseline never sees the hierarchy: its scores are per-label fits on the same features
    X = rng.standard_normal((20, 3))
    T = rng.integers(0, 2, (20, 3))
    basis = build_basis(X, 0.3)
    full = mlsvm_baseline(X, T, basis)
    single = mlsvm_baseline(X, T[:, 1], basis)
    assert np.allclose(full.scores(X)[:, 1], single.scores(X)[:, 0])


@pytest.mark.parametrize("loss", ["hinge", "logistic"])
def test_embed_without_constraints_is_baseline(rng, loss):
    # no constraints: joint features are k~ e_y^T and the shared scorer splits into per-label fits
    X = rng.standard_normal((25, 3))
    T = rng.integers(0, 2, (25, 4))
    basis = build_basis(X, 0.3)
    svm = mlsvm_baseline(X, T, basis, 1e-2, loss)
    emb = train_embed_ml(X, T, LabelHierarchy(4, (), ()), basis, MLOptions(l2=1e-2, loss=loss))
    Xq = rng.standard_normal((10, 3))
    # same objective; the residual gap is the default L-BFGS-B stopping rule of the two fits
    assert np.allclose(emb.scores(Xq), svm.scores(Xq), atol=1e-3)
