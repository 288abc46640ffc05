"""Gaussian kernels and the Nyström Euclidean embedding."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KernelConfig:
    gamma: float
    eig_floor: float = 1e-10

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.eig_floor < 0:
            raise ValueError("eig_floor must be nonnegative")


def _rows(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X.reshape(X.shape[0], -1)


def gaussian_kernel(x, y, cfg):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-cfg.gamma * d @ d))


def sq_distances(X, Z):
    """Pairwise squared Euclidean distances between rows, clipped at zero."""
    X, Z = _rows(X), _rows(Z)
    if X.shape[1] != Z.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Z.shape[1]}")
    D = (X * X).sum(1)[:, None] + (Z * Z).sum(1)[None, :] - 2.0 * (X @ Z.T)
    np.maximum(D, 0.0, out=D)
    return D


def kernel_matrix(X, Z, cfg):
    X, Z = _rows(X), _rows(Z)
    if X.shape[0] == 0 or Z.shape[0] == 0:
        raise ValueError("kernel_matrix needs nonempty inputs")
    K = np.exp(-cfg.gamma * sq_distances(X, Z))
    if X is Z or (X.shape == Z.shape and np.array_equal(X, Z)):
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
    return K


def median_gamma(X, max_points=2000, seed=0):
    """1 / median pairwise squared distance (median heuristic)."""
    X = _rows(X)
    if X.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        X = X[rng.choice(X.shape[0], max_points, replace=False)]
    D = sq_distances(X, X)
    med = np.median(D[np.triu_indices(X.shape[0], 1)])
    if not med > 0:
        raise ValueError("median pairwise distance is zero")
    return 1.0 / med


def _eigh_sym(K):
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("expected a square matrix")
    if K.size and np.max(np.abs(K - K.T)) > 1e-8:
        raise ValueError("matrix is not symmetric")
    return np.linalg.eigh(0.5 * (K + K.T))


def inv_sqrt_psd(K, eig_floor=1e-10):
    """Q diag(lam^-1/2) Q^T with eigenvalues at or below ``eig_floor`` dropped."""
    lam, Q = _eigh_sym(K)
    keep = lam > eig_floor
    scale = np.zeros_like(lam)
    scale[keep] = lam[keep] ** -0.5
    M = (Q * scale) @ Q.T
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class NystromBasis:
    """Landmarks plus the map taking kernel columns to embedded coordinates.

    ``K_half_inv`` is the symmetric n x n pseudo inverse square root. With
    ``rank`` set at construction the embedding uses the compact coordinates
    diag(lam_r^-1/2) Q_r^T of the top-r eigenspace instead; inner products
    between embedded vectors are identical to those of K_half_inv on that
    eigenspace, only the coordinate system shrinks to r.
    """

    landmarks: np.ndarray
    K_half_inv: np.ndarray
    gamma: float
    projector: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.landmarks.shape[0]

    @property
    def dim(self):
        return self.projector.shape[0]

    @property
    def cfg(self):
        return KernelConfig(self.gamma)


def build_basis(landmarks, gamma, eig_floor=1e-10, rank=None):
    """Nyström basis on ``landmarks``; ``eig_floor`` is relative to the top eigenvalue."""
    Z = _rows(landmarks).copy()
    cfg = KernelConfig(float(gamma), eig_floor)
    K = kernel_matrix(Z, Z, cfg)
    lam, Q = _eigh_sym(K)
    floor = eig_floor * max(lam[-1], 0.0)
    keep = lam > floor
    scale = np.zeros_like(lam)
    scale[keep] = lam[keep] ** -0.5
    M = (Q * scale) @ Q.T
    M = 0.5 * (M + M.T)
    if rank is None or rank >= keep.sum():
        projector = M
    else:
        top = np.argsort(lam)[::-1][:rank]
        top = top[keep[top]]
        projector = (Q[:, top] * scale[top]).T
    Z.setflags(write=False)
    M.setflags(write=False)
    projector = np.ascontiguousarray(projector)
    projector.setflags(write=False)
    return NystromBasis(Z, M, cfg.gamma, projector)


def landmark_kernel(X, basis):
    """Rows k(z_1..z_n, x) for each row x of X, shape (N, n)."""
    X = _rows(X)
    if X.shape[1] != basis.landmarks.shape[1]:
        raise ValueError(
            f"dimension mismatch: {X.shape[1]} vs landmark dim {basis.landmarks.shape[1]}"
        )
    return np.exp(-basis.gamma * sq_distances(X, basis.landmarks))


def nystrom_point(x, basis):
    x = np.asarray(x, dtype=np.float64).ravel()
    return nystrom_points(x[None, :], basis)[0]


def nystrom_points(X, basis):
    """Embedded kernel sections as rows, shape (N, d)."""
    return landmark_kernel(X, basis) @ basis.projector.T


def nystrom_function(values, basis):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.shape[0] != basis.n:
        raise ValueError(f"expected {basis.n} landmark values, got {values.shape[0]}")
    return basis.projector @ values
