"""Velocity aggregation: Gram matrix, simplex projection, weight dynamics, min-norm oracle."""

from __future__ import annotations

import numpy as np

from .core import ConvergenceError, InvalidArgumentError, SimplexWeights, as_finite_array


def gram_matrix(bundle, normalization: str = "sum") -> np.ndarray:
    """``G[k, l] = sum_i <v_k(x_i), v_l(x_i)>`` (divided by ``m`` for ``"mean"``)."""
    v = as_finite_array(bundle, "velocity bundle", ndim=3)
    g = np.einsum("kid,lid->kl", v, v)
    # exact symmetry regardless of summation order
    g = 0.5 * (g + g.T)
    if normalization == "mean":
        g /= v.shape[1]
    elif normalization != "sum":
        raise InvalidArgumentError(f"unknown gram normalization {normalization!r}")
    return g


def _project(v: np.ndarray) -> np.ndarray:
    if np.all(v >= 0) and abs(v.sum() - 1.0) <= 8 * v.size * np.finfo(np.float64).eps:
        # already on the simplex to rounding; returning it keeps projection exactly idempotent
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, v.size + 1)
    rho = np.nonzero(u + (1.0 - css) / j > 0)[0][-1]
    theta = (1.0 - css[rho]) / (rho + 1)
    w = np.maximum(v + theta, 0.0)
    # absorb rounding so the result sums to one
    return w / w.sum()


def project_simplex(v) -> SimplexWeights:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = as_finite_array(v, "vector", ndim=1)
    if v.size == 0:
        raise InvalidArgumentError("cannot project an empty vector")
    return SimplexWeights(_project(v))


def update_weights(w, g, beta: float) -> SimplexWeights:
    """One projected-gradient step on ``w^T G w``: ``Pi(w - beta G w)``."""
    if not beta > 0:
        raise InvalidArgumentError(f"beta must be positive, got {beta!r}")
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return project_simplex(w - beta * (g @ w))


def quadratic(w, g) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(w @ np.asarray(g, dtype=np.float64) @ w)


def _check_gram(g) -> np.ndarray:
    g = as_finite_array(g, "gram matrix", ndim=2)
    if g.shape[0] != g.shape[1] or g.shape[0] < 1:
        raise InvalidArgumentError(f"gram matrix must be square, got {g.shape}")
    return 0.5 * (g + g.T)


def _min_norm_pgd(g: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    K = g.shape[0]
    w = np.full(K, 1.0 / K)
    tr = np.trace(g)
    if tr <= 0:
        return w
    step = 1.0 / (2.0 * tr)
    for _ in range(max_iter):
        grad = g @ w
        w_next = _project(w - step * grad)
        # the Frank-Wolfe gap bounds w^T G w minus the simplex minimum; a
        # vanishing step additionally pins down the weights themselves
        if w @ grad - grad.min() <= tol and np.max(np.abs(w_next - w)) <= tol:
            return w_next
        w = w_next
    raise ConvergenceError(f"projected gradient did not converge in {max_iter} iterations", best=w)


def _affine_minimizer(g_sub: np.ndarray) -> np.ndarray:
    """Minimize ``mu^T G_S mu`` subject to ``sum(mu) = 1`` (KKT system, least squares)."""
    n = g_sub.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = g_sub
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n]


def _min_norm_wolfe(g: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Wolfe's minimum-norm-point method, driven only by inner products.

    The columns of ``V`` (with ``G = V^T V``) are the points; the iterate is
    the convex combination ``V lam`` restricted to a corral ``S``.
    """
    K = g.shape[0]
    scale = max(float(np.max(np.diag(g))), 1e-300)
    start = int(np.argmin(np.diag(g)))
    lam = np.zeros(K)
    lam[start] = 1.0
    active = [start]
    best = np.inf
    for _ in range(max_iter):
        grad = g @ lam
        norm_sq = lam @ grad
        j = int(np.argmin(grad))
        if norm_sq - grad[j] <= tol * scale or j in active or norm_sq >= best:
            # stalled corrals only arise from rounding; the iterate is optimal to precision
            return lam
        best = norm_sq
        active.append(j)
        while True:
            idx = np.array(active)
            mu = _affine_minimizer(g[np.ix_(idx, idx)])
            if np.all(mu > 1e-14):
                lam = np.zeros(K)
                lam[idx] = mu
                break
            cur = lam[idx]
            neg = mu <= 1e-14
            theta = np.min(cur[neg] / (cur[neg] - mu[neg]))
            new = cur + theta * (mu - cur)
            keep = new > 1e-14
            lam = np.zeros(K)
            lam[idx[keep]] = new[keep]
            lam /= lam.sum()
            active = [int(i) for i in idx[keep]]
    raise ConvergenceError(f"min-norm point did not converge in {max_iter} iterations", best=lam)


def min_norm_exact(g, tol: float = 1e-10, solver: str = "wolfe",
                   max_iter: int = 100_000) -> SimplexWeights:
    """``argmin_{w in simplex} w^T G w``.

    ``solver="wolfe"`` (default) terminates finitely with the exact corral
    solution; ``solver="pgd"`` iterates the projected-gradient weight update
    with step ``1 / (2 trace G)`` until the duality gap certifies the
    objective is within ``tol`` (relative to the largest diagonal entry) of
    the minimum and the iterate moves by less than ``tol``.
    """
    g = _check_gram(g)
    if not tol > 0:
        raise InvalidArgumentError(f"tol must be positive, got {tol!r}")
    if g.shape[0] == 1:
        return SimplexWeights(np.ones(1))
    # the minimizer is scale invariant; unit scale keeps the KKT solves well conditioned
    scale = float(np.max(np.abs(np.diag(g))))
    if scale > 0:
        g = g / scale
    if solver == "wolfe":
        w = _min_norm_wolfe(g, tol, max_iter)
    elif solver == "pgd":
        w = _min_norm_pgd(g, tol, max_iter)
    else:
        raise InvalidArgumentError(f"unknown min-norm solver {solver!r}")
    w = np.maximum(w, 0.0)
    return SimplexWeights(w / w.sum())


def aggregate_velocity(bundle, w) -> np.ndarray:
    """Row ``i`` is ``sum_k w_k v_k(x_i)``."""
    v = np.asarray(bundle, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if v.ndim != 3 or v.shape[0] != w.shape[0]:
        raise InvalidArgumentError(f"bundle {v.shape} does not match {w.shape[0]} weights")
    return np.einsum("k,kid->id", w, v)


def pareto_stationarity(g, tol: float = 1e-10, solver: str = "wolfe") -> float:
    """``min_{w in simplex} w^T G w``; zero exactly at Pareto-stationary points."""
    w = min_norm_exact(g, tol=tol, solver=solver)
    return max(quadratic(w, g), 0.0)
