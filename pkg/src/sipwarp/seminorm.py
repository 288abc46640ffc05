"""Semi-norm regularizers given by a support set of embedded vectors.

A spec holds K element vectors g_1..g_K (explicitly, or through a
structured operator that only knows how to project onto them), a partition
of the elements into groups, and a weight w. The regularizer is

    R(v)^2 = w^2 * sum_g max_{i in g} phi(<v, g_i>)^2

with phi = |.| (symmetric) or phi = [.]_+ (hinge). MAX mode is a single
group, SUM_SQ puts every element in its own group, and GROUP_MAX takes an
explicit partition (used by the mixup and multilabel applications).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels


class Mode(str, Enum):
    MAX = "max"
    SUM_SQ = "sum_sq"
    GROUP_MAX = "group_max"


class DenseElements:
    """Explicit element vectors stored as rows of a (K, D) matrix."""

    def __init__(self, G, dim=None):
        G = np.asarray(G, dtype=np.float64)
        if G.ndim == 1:
            G = G[None, :] if G.size else G.reshape(0, 0 if dim is None else dim)
        if G.shape[0] == 0 and dim is not None:
            G = G.reshape(0, dim)
        self.G = np.ascontiguousarray(G)

    @property
    def count(self):
        return self.G.shape[0]

    @property
    def dim(self):
        return self.G.shape[1]

    def project(self, V):
        return V @ self.G.T

    def adjoint(self, C):
        return C @ self.G

    def vectors(self, idx):
        return self.G[np.asarray(idx, dtype=np.intp)]


class TwoColumnElements:
    """Elements of the form P_k e_{c1[k]}^T + Q_k e_{c2[k]}^T in R^{r x m}.

    Vectors are flattened from the transposed (m, r) layout, so coordinate
    ``c * r + t`` is row t of column c of the d x m matrix.
    """

    def __init__(self, P, Q, c1, c2, m):
        self.P = np.ascontiguousarray(P, dtype=np.float64)
        self.Q = np.ascontiguousarray(Q, dtype=np.float64)
        self.c1 = np.ascontiguousarray(c1, dtype=np.int64)
        self.c2 = np.ascontiguousarray(c2, dtype=np.int64)
        self.m = int(m)
        self.r = self.P.shape[1]
        if self.P.shape != self.Q.shape or len(self.c1) != len(self.P) or len(self.c2) != len(self.P):
            raise ValueError("inconsistent two-column element arrays")

    @property
    def count(self):
        return self.P.shape[0]

    @property
    def dim(self):
        return self.m * self.r

    def project(self, V):
        V = np.ascontiguousarray(V, dtype=np.float64)
        Vt = V.reshape(V.shape[0], self.m, self.r)
        return _kernels.two_column_project(Vt, self.P, self.Q, self.c1, self.c2)

    def adjoint(self, C):
        C = np.ascontiguousarray(C, dtype=np.float64)
        out = _kernels.two_column_adjoint(C, self.P, self.Q, self.c1, self.c2, self.m)
        return out.reshape(C.shape[0], self.dim)

    def vectors(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        out = np.zeros((len(idx), self.m, self.r))
        rows = np.arange(len(idx))
        out[rows, self.c1[idx]] += self.P[idx]
        out[rows, self.c2[idx]] += self.Q[idx]
        return out.reshape(len(idx), self.dim)


@dataclass(frozen=True, eq=False)
class RegularizerSpec:
    """Support set, aggregation mode and weight of a semi-norm regularizer.

    ``ridge`` scales the Euclidean part of the ball norm,
    J(v) = ridge * ||v||^2 + R(v)^2; it is 1 everywhere except the mixup
    program, where it plays the role of alpha.
    """

    elements: object
    mode: Mode = Mode.MAX
    weight: float = 1.0
    groups: np.ndarray = None
    hinge: bool = False
    ridge: float = 1.0

    def __post_init__(self):
        el = self.elements
        if el is None:
            el = DenseElements(np.zeros((0, 0)))
        elif not hasattr(el, "project"):
            el = DenseElements(el)
        object.__setattr__(self, "elements", el)
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")
        if not self.ridge > 0:
            raise ValueError("ridge must be positive")
        K = el.count
        if self.mode is Mode.MAX:
            ptr = np.array([0, K] if K else [0], dtype=np.int64)
        elif self.mode is Mode.SUM_SQ:
            ptr = np.arange(K + 1, dtype=np.int64)
        else:
            if self.groups is None:
                raise ValueError("GROUP_MAX needs group boundaries")
            ptr = np.asarray(self.groups, dtype=np.int64)
            if ptr[0] != 0 or ptr[-1] != K or np.any(np.diff(ptr) <= 0):
                raise ValueError("group boundaries must increase from 0 to the element count")
        object.__setattr__(self, "groups", ptr)

    @property
    def count(self):
        return self.elements.count

    @property
    def empty(self):
        return self.count == 0 or self.weight == 0

    def check_dim(self, D):
        if self.count and self.elements.dim != D:
            raise ValueError(f"dimension mismatch: vector {D} vs elements {self.elements.dim}")

    def group_of(self):
        """Group id for each element."""
        return np.repeat(np.arange(len(self.groups) - 1), np.diff(self.groups))

    def with_weight(self, weight):
        return RegularizerSpec(self.elements, self.mode, weight, self.groups, self.hinge, self.ridge)


def empty_spec(ridge=1.0):
    return RegularizerSpec(None, ridge=ridge)


def reg_sq_and_coef(V, spec):
    """Unweighted sum of squared group maxima for rows of V, and gradient coefficients.

    Returns ``(s, coef)`` with s of shape (B,) and coef of shape (B, K); the
    gradient of ``s`` with respect to V is ``2 * elements.adjoint(coef)``.
    """
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    spec.check_dim(V.shape[1])
    if spec.count == 0:
        return np.zeros(V.shape[0]), np.zeros((V.shape[0], 0))
    P = np.ascontiguousarray(spec.elements.project(V))
    return _kernels.grouped_max_sq(P, spec.groups, bool(spec.hinge))


def seminorm_eval(v, spec):
    v = np.asarray(v, dtype=np.float64)
    spec.check_dim(v.shape[-1])
    if spec.empty:
        return 0.0
    s, _ = reg_sq_and_coef(v.reshape(1, -1), spec)
    return float(spec.weight * np.sqrt(s[0]))


def ball_norm_sq(v, spec):
    v = np.asarray(v, dtype=np.float64).ravel()
    r = seminorm_eval(v, spec)
    return float(spec.ridge * (v @ v) + r * r)


def active_element(v, spec):
    """Lowest index attaining max_i |<v, g_i>| (MAX mode), None for an empty set."""
    if spec.mode is not Mode.MAX:
        raise ValueError("active_element is defined for MAX mode")
    if spec.count == 0:
        return None
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    spec.check_dim(v.shape[1])
    p = spec.elements.project(v)[0]
    s = np.maximum(p, 0.0) if spec.hinge else np.abs(p)
    if spec.hinge and s.max() <= 0:
        return None
    return int(np.argmax(s))
