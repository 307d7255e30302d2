"""Slow, independent reference implementations used as test oracles."""

import itertools

import numpy as np


def lasso_objective(a, y, X, lam, couplings=()):
    r = y - X @ a
    val = r @ r + lam @ np.abs(a)
    for w, anchor, scale in couplings:
        diff = (a - anchor) * scale
        val = val + w * (diff @ diff)
    return val


def lasso_grid(y, X, lam, couplings=(), lo=-2.0, hi=2.0, step=1e-3):
    """Exhaustive search over a square grid for p = 2."""
    g = np.arange(lo, hi + step / 2, step)
    best, arg = np.inf, None
    for chunk in np.array_split(g, 20):
        a0, a1 = np.meshgrid(chunk, g, indexing="ij")
        pts = np.stack([a0.ravel(), a1.ravel()], axis=1)
        r = y[None, :] - pts @ X.T
        val = np.sum(r * r, axis=1) + np.abs(pts) @ lam
        for w, anchor, scale in couplings:
            diff = (pts - anchor) * scale
            val = val + w * np.sum(diff * diff, axis=1)
        i = int(np.argmin(val))
        if val[i] < best:
            best, arg = val[i], pts[i]
    return arg


def nnls_projected_gradient(A, b, n_steps=100_000):
    L = np.linalg.norm(A, 2) ** 2
    x = np.zeros(A.shape[1])
    for _ in range(n_steps):
        x = np.maximum(x - (A.T @ (A @ x - b)) / L, 0.0)
    return x


def dtw_paths(n, m):
    """Every monotone alignment path from (0, 0) to (n-1, m-1)."""
    def walk(i, j):
        if i == n - 1 and j == m - 1:
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in walk(a, b):
                    yield [(i, j)] + rest
    yield from walk(0, 0)


def dtw_enumerate(x, y):
    return min(sum(abs(x[i] - y[j]) for i, j in path) for path in dtw_paths(len(x), len(y)))


def best_assignment(C):
    """Maximum-sum permutation by trying all of them."""
    p = C.shape[0]
    best, arg = -np.inf, None
    for perm in itertools.permutations(range(p)):
        s = sum(C[i, perm[i]] for i in range(p))
        if s > best:
            best, arg = s, perm
    return np.array(arg), best


def random_lasso_problem(rng, with_coupling=True):
    """p = 2, T = 3 problem whose minimizer lies well inside [-2, 2]^2."""
    while True:
        X = rng.normal(size=(3, 2))
        if np.linalg.cond(X) > 5:
            continue
        y = rng.normal(size=3)
        lam = rng.uniform(0.0, 2.0, size=2)
        couplings = []
        if with_coupling:
            couplings = [(rng.uniform(0.1, 2.0), rng.uniform(-1, 1, 2), rng.uniform(0.5, 1.5, 2))]
        ref = lasso_grid(y, X, lam, couplings, lo=-2, hi=2, step=0.05)
        if np.all(np.abs(ref) < 1.8):
            return y, X, lam, couplings
