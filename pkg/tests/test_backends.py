import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sipwarp import _fallback, _kernels

core = pytest.importorskip("sipwarp._core")


@pytest.fixture
def problem(rng):
    K, r, m, B = 60, 7, 4, 5
    P, Q = rng.standard_normal((K, r)), rng.standard_normal((K, r))
    c1, c2 = rng.integers(0, m, K).astype(np.int64), rng.integers(0, m, K).astype(np.int64)
    c2[:5] = c1[:5]  # both columns in the same class
    Vt = rng.standard_normal((B, m, r))
    C = rng.standard_normal((B, K))
    ptr = np.array([0, 3, 3, 10, 25, 60], dtype=np.int64)  # includes an empty group
    return P, Q, c1, c2, Vt, C, ptr, m


def test_compiled_matches_fallback(problem):
    P, Q, c1, c2, Vt, C, ptr, m = problem
    proj_py = _fallback.two_column_project(Vt, P, Q, c1, c2)
    assert np.allclose(core.two_column_project(Vt, P, Q, c1, c2), proj_py, atol=1e-12)
    assert np.allclose(core.two_column_adjoint(C, P, Q, c1, c2, m),
                       _fallback.two_column_adjoint(C, P, Q, c1, c2, m), atol=1e-12)
    proj = np.ascontiguousarray(proj_py)
    for hinge in (False, True):
        a, b = core.grouped_max_sq(proj, ptr, hinge), _fallback.grouped_max_sq(proj, ptr, hinge)
        for x, y in zip(a, b):
            assert np.allclose(x, y, atol=1e-12)


def test_fallback_matches_dense_definition(problem):
    P, Q, c1, c2, Vt, _, _, m = problem
    proj = _fallback.two_column_project(Vt, P, Q, c1, c2)
    for b in range(len(Vt)):
        for k in range(len(P)):
            assert proj[b, k] == pytest.approx(Vt[b, c1[k]] @ P[k] + Vt[b, c2[k]] @ Q[k], abs=1e-12)


def test_pure_env_selects_fallback():
    code = "import sipwarp; print(sipwarp.BACKEND)"
    env = dict(os.environ, SIPWARP_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    assert _kernels.BACKEND == "cython"


@settings(max_examples=60, deadline=None)
@given(sizes=st.lists(st.integers(0, 5), min_size=1, max_size=8), seed=st.integers(0, 1000),
       hinge=st.booleans())
def test_grouped_max_agrees_on_any_layout(sizes, seed, hinge):
    ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
    P = np.random.default_rng(seed).standard_normal((3, int(ptr[-1])))
    P[:, ::3] = np.round(P[:, ::3])  # ties
    a, b = core.grouped_max_sq(P, ptr, hinge), _fallback.grouped_max_sq(P, ptr, hinge)
    assert np.allclose(a[0], b[0], atol=1e-12)
    assert np.array_equal(a[1], b[1])
