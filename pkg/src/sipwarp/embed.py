"""Primal and dual Euclidean embeddings of kernel representers."""

from dataclasses import dataclass
import logging

import numpy as np

from .kernelcore import nystrom_point, nystrom_points
from .polar import (
    DEGENERATE_NORM,
    DegenerateConstraint,
    SolverOptions,
    solve_min_form,
    solve_min_form_batch,
)

log = logging.getLogger(__name__)


@dataclass
class EmbedResult:
    features: np.ndarray  # d x N, one column per input
    failures: int
    unconverged: int


def embed_dual(coeffs, points, basis):
    """sum_i alpha_i * k~_{x_i}."""
    coeffs = np.asarray(coeffs, dtype=np.float64).ravel()
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if len(coeffs) != len(points):
        raise ValueError(f"{len(coeffs)} coefficients for {len(points)} points")
    if len(coeffs) == 0:
        return np.zeros(basis.dim)
    return coeffs @ nystrom_points(points, basis)


def dual_norm(u, spec, opts=None):
    u = np.asarray(u, dtype=np.float64).ravel()
    if np.linalg.norm(u) < DEGENERATE_NORM:
        return 0.0
    return solve_min_form(u, spec, opts).dual_norm


def representers_from_vectors(A, spec, opts=None, V0=None):
    """iota for each row of A (rows are k~_x); zero rows for degenerate inputs.

    Returns (features as rows, PolarBatch).
    """
    res = solve_min_form_batch(A, spec, opts, V0)
    G = res.g_circ()
    coef = np.einsum("ij,ij->i", G, A)
    F = coef[:, None] * G
    F[res.degenerate] = 0.0
    return F, res


def embed_representer(x, spec, basis, opts=None):
    a = nystrom_point(x, basis)
    if np.linalg.norm(a) < DEGENERATE_NORM:
        log.warning("input is far from every landmark; using a zero feature")
        return np.zeros(basis.dim)
    try:
        sol = solve_min_form(a, spec, opts)
    except DegenerateConstraint:
        return np.zeros(basis.dim)
    return (sol.g_circ @ a) * sol.g_circ


def batch_embed(points, spec, basis, opts=None, chunk=256):
    """Column i is embed_representer(points[i]); failures give zero columns."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return EmbedResult(np.zeros((basis.dim, 0)), 0, 0)
    if points.ndim == 1:
        points = points[None, :]
    N = len(points)
    out = np.zeros((basis.dim, N))
    failures = 0
    unconverged = 0
    for lo in range(0, N, chunk):
        A = nystrom_points(points[lo:lo + chunk], basis)
        try:
            F, res = representers_from_vectors(A, spec, opts)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("embedding chunk at %d failed: %s", lo, exc)
            failures += len(A)
            continue
        bad = ~np.all(np.isfinite(F), axis=1)
        F[bad] = 0.0
        failures += int(bad.sum() + res.degenerate.sum())
        unconverged += int((~res.converged & ~res.degenerate).sum())
        out[:, lo:lo + len(A)] = F.T
    return EmbedResult(out, failures, unconverged)


__all__ = [
    "EmbedResult", "SolverOptions", "batch_embed", "dual_norm", "embed_dual",
    "embed_representer", "representers_from_vectors",
]
