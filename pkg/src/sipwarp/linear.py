"""L2-regularized linear heads (softmax and per-output logistic) fit by L-BFGS."""

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp


def _softmax_obj(W, F, Y, l2):
    # F: (N, r), Y: (N, m) soft targets, W: (r, m)
    S = F @ W
    lse = logsumexp(S, axis=1)
    P = np.exp(S - lse[:, None])
    N = len(F)
    loss = (Y.sum(1) * lse - (Y * S).sum(1)).mean() + l2 * (W * W).sum()
    grad = F.T @ (P * Y.sum(1, keepdims=True) - Y) / N + 2 * l2 * W
    return loss, grad


def fit_softmax(F, Y, l2=1e-3, max_iter=500, W0=None):
    """Multinomial logistic regression with soft labels; returns W of shape (r, m)."""
    F = np.asarray(F, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    r, m = F.shape[1], Y.shape[1]
    w0 = np.zeros(r * m) if W0 is None else np.ravel(W0)

    def fun(w):
        val, g = _softmax_obj(w.reshape(r, m), F, Y, l2)
        return val, g.ravel()

    res = minimize(fun, w0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return res.x.reshape(r, m)


def fit_joint_softmax(Phi, Y, l2=1e-3, max_iter=500, W0=None):
    """Softmax over classes with scores <W, Phi[n, y]>; Phi has shape (N, m, D)."""
    Phi = np.asarray(Phi, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    N, m, D = Phi.shape
    flat = Phi.reshape(N * m, D)
    w0 = np.zeros(D) if W0 is None else np.ravel(W0)

    def fun(w):
        S = (flat @ w).reshape(N, m)
        lse = logsumexp(S, axis=1)
        P = np.exp(S - lse[:, None])
        loss = (Y.sum(1) * lse - (Y * S).sum(1)).mean() + l2 * (w @ w)
        coef = (P * Y.sum(1, keepdims=True) - Y).ravel() / N
        return loss, flat.T @ coef + 2 * l2 * w

    res = minimize(fun, w0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return res.x


def joint_scores(Phi, w):
    N, m, D = Phi.shape
    return (Phi.reshape(N * m, D) @ w).reshape(N, m)


def fit_joint_binary(Phi, T, l2=1e-3, loss="logistic", free=0, max_iter=500):
    """Shared weights over joint features: score <w, Phi[n, y]>, target T[n, y] in {0, 1}.

    The loss is averaged over examples and summed over labels, and the last
    ``free`` weights are not regularized, so a block-diagonal Phi reproduces
    independent ``fit_binary`` problems exactly.
    """
    if loss not in ("logistic", "hinge"):
        raise ValueError(f"unknown loss {loss!r}")
    Phi = np.asarray(Phi, dtype=np.float64)
    N, m, D = Phi.shape
    flat = Phi.reshape(N * m, D)
    s = 2.0 * np.asarray(T, dtype=np.float64).ravel() - 1.0
    mask = np.ones(D)
    if free:
        mask[D - free:] = 0.0

    def fun(w):
        z = flat @ w
        if loss == "hinge":
            h = np.maximum(0.0, 1.0 - s * z)
            val, g = (h * h).sum(), -2.0 * s * h
        else:
            u = -s * z
            lv = np.logaddexp(0.0, u)
            val, g = lv.sum(), -s * np.exp(u - lv)
        wr = mask * w
        return val / N + l2 * (wr @ wr), flat.T @ g / N + 2 * l2 * wr

    res = minimize(fun, np.zeros(D), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return res.x


def fit_binary(F, t, l2=1e-3, loss="logistic", max_iter=500):
    """Linear classifier with bias for targets t in {0, 1}; loss is "logistic" or "hinge" (squared).

    Returns (w, b); the bias is not regularized.
    """
    if loss not in ("logistic", "hinge"):
        raise ValueError(f"unknown loss {loss!r}")
    s = 2.0 * np.asarray(t, dtype=np.float64) - 1.0
    F = np.asarray(F, dtype=np.float64)
    N, D = F.shape
    A = np.hstack([F, np.ones((N, 1))])

    def fun(wb):
        z = A @ wb
        if loss == "hinge":
            # squared hinge keeps L-BFGS smooth
            h = np.maximum(0.0, 1.0 - s * z)
            val = (h * h).mean()
            g = A.T @ (-2.0 * s * h) / N
        else:
            u = -s * z
            lv = np.logaddexp(0.0, u)
            val = lv.mean()
            g = A.T @ (-s * np.exp(u - lv)) / N
        w = wb[:-1]
        g[:-1] += 2 * l2 * w
        return val + l2 * (w @ w), g

    res = minimize(fun, np.zeros(D + 1), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return res.x[:-1], res.x[-1]


def one_hot(y, m):
    y = np.asarray(y, dtype=np.intp)
    out = np.zeros((len(y), m))
    out[np.arange(len(y)), y] = 1.0
    return out


def validation_split(n, frac, rng):
    perm = rng.permutation(n)
    k = max(1, int(round(frac * n)))
    return perm[k:], perm[:k]
