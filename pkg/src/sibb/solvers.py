"""Numerical kernels: coupled weighted lasso, NNLS and least squares.

The coupled lasso minimizes, for one channel row ``a`` (length p)::

    ||y - Phi a||^2 + sum_j lam_j |a_j| + sum_c w_c ||(a - anchor_c) * scale_c||^2

Each coupling is a coordinate-separable quadratic, so it is folded into the
problem as extra ridge rows and the whole thing is solved by cyclic
coordinate descent on the Gram form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np


@dataclass
class Coupling:
    weight: float
    anchor: np.ndarray
    scale: np.ndarray


@dataclass
class CoupledLassoProblem:
    target: np.ndarray
    design: np.ndarray
    l1_weights: np.ndarray
    couplings: Sequence[Coupling] = field(default_factory=list)
    nonneg: bool = False

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float).ravel()
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.l1_weights = np.asarray(self.l1_weights, dtype=float).ravel()
        n, p = self.design.shape
        if self.target.shape[0] != n:
            raise ValueError(f"target length {self.target.shape[0]} != design rows {n}")
        if self.l1_weights.shape[0] != p:
            raise ValueError(f"l1_weights length {self.l1_weights.shape[0]} != p={p}")
        if np.any(self.l1_weights < 0):
            raise ValueError("l1 weights must be nonnegative")
        for c in self.couplings:
            if c.weight < 0:
                raise ValueError("coupling weights must be nonnegative")
            if np.shape(c.anchor) != (p,) or np.shape(c.scale) != (p,):
                raise ValueError("coupling anchor/scale must have length p")

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    def augmented(self):
        """Return ``(design, target)`` with the couplings appended as ridge rows."""
        p = self.n_coef
        rows = [self.design]
        targets = [self.target]
        for c in self.couplings:
            root = np.sqrt(c.weight) * np.asarray(c.scale, dtype=float)
            rows.append(np.diag(root))
            targets.append(root * np.asarray(c.anchor, dtype=float))
        return np.vstack(rows).reshape(-1, p), np.concatenate(targets)

    def objective(self, a) -> float:
        a = np.asarray(a, dtype=float)
        r = self.target - self.design @ a
        val = r @ r + self.l1_weights @ np.abs(a)
        for c in self.couplings:
            diff = (a - c.anchor) * c.scale
            val += c.weight * (diff @ diff)
        return float(val)


class LassoSolution(NamedTuple):
    coef: np.ndarray
    converged: bool
    n_iter: int


class NNLSSolution(NamedTuple):
    x: np.ndarray
    rnorm: float
    converged: bool


@numba.njit(cache=True)
def _cd_rows(gram, xty, l1, coef, tol, max_iter, nonneg):
    """Cyclic coordinate descent, one independent problem per row.

    ``gram`` is (R, p, p), ``xty`` and ``l1`` are (R, p); ``coef`` (R, p) is the
    warm start and is updated in place. Objective per row is
    ``a' G a - 2 b' a + sum l1 |a|``. Returns sweeps used per row (negative
    when the cap was hit).
    """
    n_rows, p = xty.shape
    sweeps = np.empty(n_rows, dtype=np.int64)
    for r in range(n_rows):
        used = -max_iter
        for it in range(max_iter):
            max_delta = 0.0
            for j in range(p):
                gjj = gram[r, j, j]
                old = coef[r, j]
                if gjj <= 0.0:
                    new = 0.0
                else:
                    rho = xty[r, j]
                    for k in range(p):
                        if k != j:
                            rho -= gram[r, j, k] * coef[r, k]
                    half = 0.5 * l1[r, j]
                    if rho > half:
                        new = (rho - half) / gjj
                    elif rho < -half and not nonneg:
                        new = (rho + half) / gjj
                    else:
                        new = 0.0
                coef[r, j] = new
                delta = abs(new - old)
                if delta > max_delta:
                    max_delta = delta
            if max_delta < tol:
                used = it + 1
                break
        sweeps[r] = used
    return sweeps


def coupled_lasso_rows(gram, xty, l1, coef0=None, tol=1e-8, max_iter=10_000,
                       nonneg=False):
    """Solve many independent coupled-lasso rows given in Gram form.

    ``gram`` is (R, p, p) and already contains the coupling ridge diagonal;
    ``xty`` (R, p) contains the matching linear term. Returns
    ``(coef, converged)`` with ``converged`` a boolean per row.
    """
    gram = np.ascontiguousarray(gram, dtype=float)
    xty = np.ascontiguousarray(xty, dtype=float)
    l1 = np.ascontiguousarray(np.broadcast_to(l1, xty.shape), dtype=float)
    coef = np.zeros_like(xty) if coef0 is None else np.array(coef0, dtype=float, order="C")
    if nonneg:
        np.maximum(coef, 0.0, out=coef)
    sweeps = _cd_rows(gram, xty, l1, coef, float(tol), int(max_iter), bool(nonneg))
    return coef, sweeps > 0


def solve_coupled_lasso(problem: CoupledLassoProblem, tol: float = 1e-8,
                        max_iter: int = 10_000, coef0=None) -> LassoSolution:
    """Minimize the coupled weighted-lasso objective for a single row.

    The couplings are appended to the design as ridge rows (one per coupling
    and coordinate), then coordinate descent runs until the largest
    coordinate change in a sweep drops below ``tol``. On hitting
    ``max_iter`` the last iterate is returned with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    design, target = problem.augmented()
    gram = (design.T @ design)[None]
    xty = (design.T @ target)[None]
    start = None if coef0 is None else np.asarray(coef0, dtype=float)[None]
    coef = np.zeros_like(xty) if start is None else np.array(start, order="C")
    if problem.nonneg:
        np.maximum(coef, 0.0, out=coef)
    sweeps = _cd_rows(np.ascontiguousarray(gram), np.ascontiguousarray(xty),
                      problem.l1_weights[None].copy(), coef, float(tol), int(max_iter),
                      bool(problem.nonneg))
    n = int(sweeps[0])
    return LassoSolution(coef[0], n > 0, abs(n))


def nnls(design, target, tol: float | None = None, max_iter: int | None = None) -> NNLSSolution:
    """Lawson-Hanson active-set solution of ``min ||design x - target||`` s.t. ``x >= 0``.

    ``tol`` bounds the dual (gradient) entries of the inactive set at exit;
    by default it scales with machine epsilon and the problem size.
    """
    A = np.atleast_2d(np.asarray(design, dtype=float))
    b = np.asarray(target, dtype=float).ravel()
    m, n = A.shape
    if b.shape[0] != m:
        raise ValueError(f"target length {b.shape[0]} != design rows {m}")
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, np.abs(A).max(initial=0.0)) \
            * max(1.0, np.abs(b).max(initial=0.0))
    if max_iter is None:
        max_iter = 3 * n + 30

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ (b - A @ x)
    converged = True
    outer = 0
    while np.any(~passive) and np.max(w[~passive], initial=-np.inf) > tol:
        if outer >= max_iter:
            converged = False
            break
        outer += 1
        cand = np.where(passive, -np.inf, w)
        passive[int(np.argmax(cand))] = True

        while True:
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > 0):
                break
            # step back toward x until the first passive coordinate hits zero
            blocking = passive & (z <= 0)
            denom = x[blocking] - z[blocking]
            ratios = np.divide(x[blocking], denom, out=np.zeros_like(denom), where=denom > 0)
            alpha = np.min(ratios)
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
            if not np.any(passive):
                z = np.zeros(n)
                break
        x = z
        w = A.T @ (b - A @ x)
    rnorm = float(np.linalg.norm(A @ x - b))
    return NNLSSolution(x, rnorm, converged)


def least_squares(design, target) -> np.ndarray:
    """Minimum-norm least-squares solution (SVD based, handles rank deficiency)."""
    A = np.atleast_2d(np.asarray(design, dtype=float))
    b = np.asarray(target, dtype=float)
    return np.linalg.lstsq(A, b, rcond=None)[0]
