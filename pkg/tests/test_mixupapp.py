import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sipwarp.kernelcore import build_basis, nystrom_points
from sipwarp.linear import fit_softmax, one_hot
from sipwarp.mixupapp import (
    JointFeature,
    MixupOptions,
    MixupPair,
    build_family,
    embed_joint_mixup,
    embedded_path,
    family_spec,
    interpolate_pair,
    loss_vs_lambda_curve,
    max_lambda_violation,
    mixed_inputs,
    mixup_direction,
    pairs_from_indices,
    train_vanilla_mixup,
    write_curve_csv,
)
from sipwarp.polar import SolverOptions

from oracles import min_form

TIGHT = SolverOptions(tol=1e-11, max_iters=3000)


@pytest.fixture
def toy(rng):
    X = rng.random((14, 4))
    y = rng.integers(0, 3, 14)
    return X, y, build_basis(X, 0.8)


def _pair(X, y, i, j, m=3):
    return pairs_from_indices(X, y, m, [i], [j])[0]


def test_interpolate_pair_examples():
    p = MixupPair(0, 1, np.array([0.0, 2.0]), np.array([4.0, 6.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    x, y = interpolate_pair(p, 0.25)
    assert np.allclose(x, [3.0, 5.0])
    assert np.allclose(y, [0.25, 0.75])
    assert np.allclose(interpolate_pair(p, 1.0)[0], p.x_i)
    assert np.allclose(interpolate_pair(p, 0.0)[1], p.y_j)
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            interpolate_pair(p, bad)


def test_direction_vanishes_for_identical_pair(toy):
    X, y, basis = toy
    p = _pair(X, y, 3, 3)
    for lam in (0.0, 0.4, 1.0):
        assert np.array_equal(mixup_direction(p, lam, basis), np.zeros((basis.dim, 3)))


def test_direction_same_input_different_labels(toy):
    X, y, basis = toy
    Y = one_hot([0, 2], 3)
    p = MixupPair(0, 1, X[5], X[5], Y[0], Y[1])
    k = nystrom_points(X[5][None], basis)[0]
    assert np.allclose(mixup_direction(p, 0.3, basis), np.outer(k, Y[0] - Y[1]), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(0.01, 0.99))
def test_path_derivative_matches_central_difference(lam):
    rng = np.random.default_rng(7)
    X = rng.random((9, 3))
    basis = build_basis(X, 1.3)
    h = 1e-5
    _, dk = embedded_path(X[1], X[2], lam, basis)
    kp, _ = embedded_path(X[1], X[2], lam + h, basis)
    km, _ = embedded_path(X[1], X[2], lam - h, basis)
    fd = (kp - km) / (2 * h)
    assert np.linalg.norm(dk - fd) <= 1e-5 * max(np.linalg.norm(dk), 1e-12)


def test_max_violation_zero_matrix(toy):
    X, y, basis = toy
    lam, val = max_lambda_violation(np.zeros((basis.dim, 3)), _pair(X, y, 0, 1), basis)
    assert (lam, val) == (0.0, 0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_max_violation_dominates_fine_grid(seed):
    rng = np.random.default_rng(seed)
    X = rng.random((8, 3))
    y = rng.integers(0, 3, 8)
    basis = build_basis(X, 1.0)
    p = _pair(X, y, 0, 1)
    V = rng.standard_normal((basis.dim, 3))
    lam, val = max_lambda_violation(V, p, basis)
    fine = np.linspace(0, 1, 2001)
    grid_best = max(np.sum(V * mixup_direction(p, float(t), basis)) ** 2 for t in fine)
    assert val >= grid_best - 1e-8
    assert val == pytest.approx(np.sum(V * mixup_direction(p, lam, basis)) ** 2, rel=1e-12, abs=1e-15)


def test_embed_without_pairs_is_plain(toy):
    X, _, basis = toy
    k = nystrom_points(X[2][None], basis)[0]
    for alpha in (1.0, 0.1):
        f = embed_joint_mixup(X[2], 1, [], alpha, basis, m=3)
        expect = np.zeros((basis.dim, 3))
        expect[:, 1] = k
        assert np.allclose(f.matrix, expect, atol=1e-10)
    with pytest.raises(ValueError):
        embed_joint_mixup(X[2], 1, [], 1.0, basis)
    with pytest.raises(ValueError):
        embed_joint_mixup(X[2], 1, [], 0.0, basis, m=3)


def _joint_oracle(x, label, pairs, alpha, basis, m, lams):
    """Dense-grid mixup ball through cvxpy on the flattened (m, d) layout."""
    rows, groups = [], [0]
    for p in pairs:
        for t in lams:
            rows.append(mixup_direction(p, float(t), basis).T.ravel())
        groups.append(len(rows))
    a = JointFeature(np.outer(nystrom_points(x[None], basis)[0], np.eye(m)[label])).flat()
    v, J = min_form(a, np.array(rows), groups, weight=1 / np.sqrt(len(pairs)), ridge=alpha)
    return alpha * v / J, J


def test_embed_matches_dense_grid_oracle(rng):
    X = rng.random((10, 3))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    basis = build_basis(X[:6], 1.5)
    assert basis.dim == 6
    pairs = pairs_from_indices(X, y, 3, [0, 1, 2, 6], [4, 5, 3, 7])
    alpha = 0.2
    f = embed_joint_mixup(X[8], 2, pairs, alpha, basis, TIGHT, grid=5)
    ref, J_ref = _joint_oracle(X[8], 2, pairs, alpha, basis, 3, np.linspace(0, 1, 801))
    assert np.abs(f.flat() - ref).max() <= 1e-4 * np.abs(ref).max()
    # <iota, a> = alpha / J recovers the optimal objective
    a = JointFeature(np.outer(nystrom_points(X[8][None], basis)[0], np.eye(3)[2])).flat()
    J = alpha / (f.flat() @ a)
    assert J >= J_ref - 1e-6  # the dense grid only relaxes the sup over lambda
    assert J - J_ref <= 1e-6


def test_embed_constraint_is_active(toy):
    # iota = alpha v/J with <a, v> = 1, so <iota, a> = alpha / J and the flipped point sits on the sphere
    X, y, basis = toy
    pairs = pairs_from_indices(X, y, 3, [0, 1, 2], [3, 4, 5])
    f = embed_joint_mixup(X[9], 0, pairs, 1.0, basis, TIGHT, grid=7)
    a = JointFeature(np.outer(nystrom_points(X[9][None], basis)[0], np.eye(3)[0])).flat()
    fam = build_family(np.stack([p.x_i for p in pairs]), np.stack([p.x_j for p in pairs]),
                       [int(np.argmax(p.y_i)) for p in pairs], [int(np.argmax(p.y_j)) for p in pairs],
                       3, basis, 7)
    spec = family_spec(fam, 1.0)
    assert spec.weight == pytest.approx(1 / np.sqrt(3))
    coef = f.flat() @ a
    g = f.flat() / np.sqrt(coef)
    assert g @ g <= 1.0 + 1e-8


def test_embed_reduces_mixup_violation(toy):
    X, y, basis = toy
    pairs = pairs_from_indices(X, y, 3, [0, 1, 2, 6], [3, 4, 5, 7])
    x = X[10]
    plain = embed_joint_mixup(x, 1, [], 1.0, basis, m=3).matrix
    emb = embed_joint_mixup(x, 1, pairs, 1.0, basis, TIGHT)

    def worst(V):
        return max(max_lambda_violation(V / np.linalg.norm(V), p, basis)[1] for p in pairs)

    assert worst(emb.matrix) <= worst(plain) + 1e-12


def test_embed_is_deterministic(toy):
    X, y, basis = toy
    pairs = pairs_from_indices(X, y, 3, [0, 1], [2, 3])
    a = embed_joint_mixup(X[5], 2, pairs, 0.5, basis)
    b = embed_joint_mixup(X[5], 2, pairs, 0.5, basis)
    assert np.array_equal(a.matrix, b.matrix)


def test_mixed_inputs_examples(rng):
    X = rng.random((5, 2))
    Y = one_hot([0, 1, 0, 1, 1], 2)
    Xa, Ya = mixed_inputs(X, Y, 0, 1.0, rng)
    assert np.array_equal(Xa, X) and np.array_equal(Ya, Y)
    Xm, Ym = mixed_inputs(X, Y, 7, 1.0, np.random.default_rng(3), lam_fixed=0.5)
    assert Xm.shape == (12, 2) and np.array_equal(Xm[:5], X)
    assert np.allclose(Ym.sum(1), 1.0)
    assert set(np.round(Ym[5:].ravel(), 12)) <= {0.0, 0.5, 1.0}
    only, _ = mixed_inputs(X, Y, 7, 1.0, np.random.default_rng(3), keep_originals=False)
    assert len(only) == 7


def test_vanilla_without_pairs_is_plain_training(toy):
    X, y, basis = toy
    opts = MixupOptions(l2_grid=(1e-3,), max_iter=300)
    model = train_vanilla_mixup(X, y, 3, 0, basis, opts, np.random.default_rng(0))
    W = fit_softmax(nystrom_points(X, basis), one_hot(y, 3), 1e-3, 300)
    assert np.allclose(model.W, W)


def test_curve_rows(toy, tmp_path):
    X, y, basis = toy
    model = train_vanilla_mixup(X, y, 3, 10, basis, MixupOptions(l2_grid=(1e-2,), beta_grid=(1.0,)))
    p = _pair(X, y, 0, 1)
    rows = loss_vs_lambda_curve(model, p)
    assert len(rows) == 11
    assert rows[0][0] == 0.0 and rows[-1][0] == 1.0
    P = model.predict_proba(np.stack([p.x_j, p.x_i]))
    assert rows[0][1] == pytest.approx(-np.log(P[0] @ p.y_j))
    assert rows[-1][1] == pytest.approx(-np.log(P[1] @ p.y_i))
    same = loss_vs_lambda_curve(model, _pair(X, y, 4, 4))
    assert np.ptp([r[1] for r in same]) < 1e-12
    path = tmp_path / "curve.csv"
    write_curve_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "lambda,loss" and len(lines) == 12
