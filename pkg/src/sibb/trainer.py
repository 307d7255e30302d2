"""Alternating fit of per-state building blocks and per-trial traces.

Each outer iteration visits the states in order. For state ``d`` the BB
matrix is refit on a random batch of trials (re-weighted l1 with graph
filtered weights and a quadratic pull toward the other states' BBs), its
columns are rescaled to unit max-abs, and then every trial's trace matrix
is re-solved time point by time point.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel_graph import ChannelGraphSet, build_channel_graphs
from .data import MultiStateDataset, hconcat_observations, vconcat_traces
from .solvers import coupled_lasso_rows, least_squares, nnls
from .state_graph import StateGraph, categorical_p

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """A NaN or infinite value appeared in an iterate."""


@dataclass
class HyperParams:
    p: int = 10
    epsilon: float = 0.01
    beta: float = 0.09
    w_graph: float = 1.0
    gamma1: float = 0.1
    gamma2: float = 0.1
    gamma3: float = 0.0
    gamma4: float = 1e-4
    sigma_h: float | None = None
    sigma_p: float = 1.0
    k: int = 25
    nu: list | None = None
    nonneg_traces: bool = False
    nonneg_bbs: bool = False
    max_iter: int = 1000
    batch_size: int = 8
    a_repeats: int = 2
    rwl1_inner_iters: int = 2
    seed: int = 0
    l1_scale: str = "energy"
    cd_tol: float = 1e-8
    cd_max_iter: int = 10_000
    reset_lambda: bool = False
    conv_tol: float = 1e-6
    conv_window: int = 5

    def __post_init__(self):
        if self.nu is None:
            self.nu = [1.0] * self.p
        self.nu = [float(v) for v in self.nu]
        self.validate()

    def validate(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if len(self.nu) != self.p:
            raise ValueError(f"nu has length {len(self.nu)}, expected p={self.p}")
        if any(v < 0 for v in self.nu):
            raise ValueError("nu entries must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        for name in ("gamma1", "gamma2", "gamma3", "gamma4", "w_graph"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sigma_h is not None and not self.sigma_h > 0:
            raise ValueError("sigma_h must be positive")
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l1_scale not in ("none", "samples", "energy"):
            raise ValueError("l1_scale must be 'none', 'samples' or 'energy'")
        for name in ("max_iter", "batch_size", "a_repeats", "rwl1_inner_iters"):
            if getattr(self, name) < 0 or (name != "max_iter" and getattr(self, name) < 1):
                raise ValueError(f"{name} out of range")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


@dataclass
class BBModel:
    bbs: list
    traces: list
    lambdas: list
    history: list = field(default_factory=list)

    @property
    def n_states(self) -> int:
        return len(self.bbs)

    @property
    def p(self) -> int:
        return self.bbs[0].shape[1]

    def copy(self) -> "BBModel":
        return BBModel([a.copy() for a in self.bbs],
                       [[f.copy() for f in st] for st in self.traces],
                       [lam.copy() for lam in self.lambdas],
                       [h.copy() for h in self.history])

    @property
    def total_error(self) -> np.ndarray:
        """Summed per-trial Frobenius error for every recorded iteration."""
        return np.array([h.sum() for h in self.history])


def reconstruct(model: BBModel, d: int, m: int) -> np.ndarray:
    return model.bbs[d] @ model.traces[d][m].T


def trial_errors(model: BBModel, dataset: MultiStateDataset) -> np.ndarray:
    """Frobenius error over observed entries, one value per trial (state-major)."""
    out = []
    for d, m, tr in dataset.iter_trials():
        resid = (tr.values - reconstruct(model, d, m))[tr.observed]
        out.append(math.sqrt(float(resid @ resid)))
    return np.array(out)


# ------------------------------------------------------------------ lambda

def _lambda_state(A, H, hp: HyperParams) -> np.ndarray:
    graph = np.abs(H @ A)
    denom = hp.beta + np.abs(A) + hp.w_graph * graph
    if np.any(denom <= 0):
        raise ZeroDivisionError(
            "lambda denominator is zero (beta = 0 with zero BB entries and zero graph term)")
    return hp.epsilon / denom


def update_lambda(A, H, hp: HyperParams):
    """Graph-filtered l1 weights, ``eps / (beta + |A| + w_graph |H A|)`` elementwise.

    ``A`` and ``H`` may be single matrices or per-state sequences.
    """
    if isinstance(A, np.ndarray):
        H_d = H if isinstance(H, np.ndarray) else H[0]
        return _lambda_state(A, H_d, hp)
    return [_lambda_state(a, h, hp) for a, h in zip(A, H)]


# ------------------------------------------------------------------ init

def _normalize_columns(A, traces):
    """Scale each nonzero column of A to max-abs 1 (sign of its largest entry
    made positive) and counter-scale the matching trace columns."""
    idx = np.argmax(np.abs(A), axis=0)
    scale = A[idx, np.arange(A.shape[1])]
    nz = scale != 0
    A[:, nz] /= scale[nz]
    for phi in traces:
        phi[:, nz] *= scale[nz]
    return scale


def _ls_traces(y, observed, A, nonneg):
    if observed.all():
        phi = least_squares(A, y).T
    else:
        phi = np.empty((y.shape[1], A.shape[1]))
        for t in range(y.shape[1]):
            rows = observed[:, t]
            phi[t] = least_squares(A[rows], y[rows, t])
    if nonneg:
        np.maximum(phi, 0.0, out=phi)
    return phi


def init_model(dataset: MultiStateDataset, hp: HyperParams, seed=None) -> BBModel:
    """Uniform [0, 1) BBs (one draw shared by all states), least-squares traces."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        hp.seed if seed is None else seed)
    base = rng.random((dataset.channel_count, hp.p))
    bbs, traces = [], []
    for d in range(dataset.n_states):
        A = base.copy()
        _normalize_columns(A, [])
        bbs.append(A)
        traces.append([_ls_traces(tr.values, tr.observed, A, hp.nonneg_traces)
                       for tr in dataset.states[d].trials])
    lambdas = [np.full_like(a, hp.epsilon / hp.beta if hp.beta > 0 else 1.0) for a in bbs]
    return BBModel(bbs, traces, lambdas)


# ------------------------------------------------------------------ A update

def _l1_multiplier(hp: HyperParams, gram, n_samples):
    """Per-row factor applied to the l1 weights before the lasso solve.

    "none" uses the weights as is, "samples" treats the fidelity term as a
    mean over the row's samples (factor 2n, the convention of common lasso
    solvers), and "energy" uses the mean squared column norm of the row's
    design. With "energy" the balance between fit and sparsity does not
    change when the data are rescaled; the cross-state coupling is left in
    raw units.
    """
    if hp.l1_scale == "samples":
        return 2.0 * np.asarray(n_samples, dtype=float)
    if hp.l1_scale == "energy":
        p = gram.shape[-1]
        return np.trace(gram, axis1=-2, axis2=-1) / p
    return np.ones(gram.shape[0])


def sample_batch(rng: np.random.Generator, n_trials: int, batch_size: int) -> np.ndarray:
    size = min(batch_size, n_trials)
    return np.sort(rng.choice(n_trials, size=size, replace=False))


def update_A_state(model: BBModel, dataset: MultiStateDataset, d: int,
                   H: ChannelGraphSet, P: StateGraph | np.ndarray, hp: HyperParams,
                   batch=None):
    """Refit ``A^d`` (and ``lambda^d``) in place on the given trial batch.

    All channel rows are solved jointly for each re-weighting pass and the
    weights are then refreshed from the full new matrix, so the result does
    not depend on channel order.
    """
    Pv = P.values if isinstance(P, StateGraph) else np.asarray(P)
    batch = np.arange(dataset.n_trials(d)) if batch is None else batch
    y, obs = hconcat_observations(dataset, d, batch)
    phi = vconcat_traces(model, d, batch)
    n, p = model.bbs[d].shape

    if obs.all():
        gram = np.broadcast_to(phi.T @ phi, (n, p, p)).copy()
        xty = y @ phi
        n_obs = np.full(n, y.shape[1])
    else:
        w = obs.astype(float)
        # one GEMM against the per-sample outer products phi_t phi_t'
        outer = (phi[:, :, None] * phi[:, None, :]).reshape(phi.shape[0], p * p)
        gram = (w @ outer).reshape(n, p, p)
        xty = (np.where(obs, y, 0.0)) @ phi
        n_obs = obs.sum(axis=1)

    nu2 = np.asarray(hp.nu) ** 2
    mult = _l1_multiplier(hp, gram, n_obs)[:, None]
    ridge = np.zeros((n, p))
    lin = np.zeros((n, p))
    for dd in range(model.n_states):
        if dd == d or Pv[d, dd] == 0:
            continue
        ridge += Pv[d, dd] * nu2
        lin += Pv[d, dd] * nu2 * model.bbs[dd]
    idx = np.arange(p)
    gram[:, idx, idx] += ridge
    xty = xty + lin

    H_d = H[d]
    lam = model.lambdas[d]
    A = model.bbs[d]
    for _ in range(hp.rwl1_inner_iters):
        A, ok = coupled_lasso_rows(gram, xty, lam * mult, A, hp.cd_tol, hp.cd_max_iter,
                                   hp.nonneg_bbs)
        if not ok.all():
            warnings.warn(f"state {d}: lasso did not converge for {np.count_nonzero(~ok)} rows",
                          RuntimeWarning, stacklevel=2)
        lam = _lambda_state(A, H_d, hp)
    _normalize_columns(A, model.traces[d])
    model.bbs[d] = A
    model.lambdas[d] = lam
    return A, lam


# ------------------------------------------------------------------ Phi update

def _decorrelation_block(prev_phi, hp: HyperParams):
    p = prev_phi.shape[1]
    norms = np.linalg.norm(prev_phi, axis=0)
    if np.any(norms < NORM_FLOOR):
        warnings.warn("zero-norm trace column; norm floored at 1e-12", RuntimeWarning,
                      stacklevel=3)
        norms = np.maximum(norms, NORM_FLOOR)
    dbar = 1.0 / np.outer(norms, norms)
    return hp.gamma4 * (np.ones((p, p)) / p - np.eye(p)) * np.sqrt(dbar)


def update_phi_trial(y, mask, A, prev_phi, hp: HyperParams) -> np.ndarray:
    """Re-solve one trial's traces, one stacked least-squares system per time point.

    The stacked design is ``[A; decorrelation block; (g1+g2+g3) I]`` and the
    target ``[y_t; 0; g2 phi_prev_t + g3 phi_{t-1}]``. Time points run in
    increasing order so ``phi_{t-1}`` is the freshly updated value; at t=0
    the previous iteration's value stands in for it.
    """
    y = np.asarray(y, dtype=float)
    prev_phi = np.asarray(prev_phi, dtype=float)
    T = y.shape[1]
    p = A.shape[1]
    observed = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lower = np.vstack([_decorrelation_block(prev_phi, hp),
                       (hp.gamma1 + hp.gamma2 + hp.gamma3) * np.eye(p)])
    g2, g3 = hp.gamma2, hp.gamma3
    zeros = np.zeros(p)

    full = observed.all()
    if full and not hp.nonneg_traces:
        design = np.vstack([A, lower])
        if g3 == 0:
            targets = np.vstack([y, np.zeros((p, T)), g2 * prev_phi.T])
            return least_squares(design, targets).T
        op = np.linalg.pinv(design)
        phi = np.empty((T, p))
        last = prev_phi[0]
        for t in range(T):
            target = np.concatenate([y[:, t], zeros, g2 * prev_phi[t] + g3 * last])
            phi[t] = op @ target
            last = phi[t]
        return phi

    ridge = hp.gamma1 + hp.gamma2 + hp.gamma3
    if not hp.nonneg_traces and ridge > 0:
        return _masked_phi_normal(y, observed, A, lower, prev_phi, hp)

    solve = (lambda M, b: nnls(M, b).x) if hp.nonneg_traces else least_squares
    phi = np.empty((T, p))
    last = prev_phi[0]
    design_full = np.vstack([A, lower])
    for t in range(T):
        rows = observed[:, t]
        design = design_full if rows.all() else np.vstack([A[rows], lower])
        target = np.concatenate([y[rows, t], zeros, g2 * prev_phi[t] + g3 * last])
        phi[t] = solve(design, target)
        last = phi[t]
    return phi


def _masked_phi_normal(y, observed, A, lower, prev_phi, hp: HyperParams) -> np.ndarray:
    """Masked unconstrained traces via per-time-point normal equations.

    The ``(g1+g2+g3) I`` rows make every system positive definite, so this
    gives the same minimizer as the stacked least squares at a fraction of
    the cost.
    """
    T, p = y.shape[1], A.shape[1]
    w = observed.astype(float)
    outer = (A[:, :, None] * A[:, None, :]).reshape(A.shape[0], p * p)
    grams = (w.T @ outer).reshape(T, p, p) + lower.T @ lower
    data_rhs = (np.where(observed, y, 0.0).T @ A)
    ridge = hp.gamma1 + hp.gamma2 + hp.gamma3
    # only the identity block of ``lower`` has a nonzero target
    if hp.gamma3 == 0:
        rhs = data_rhs + ridge * hp.gamma2 * prev_phi
        return np.linalg.solve(grams, rhs[:, :, None])[:, :, 0]
    phi = np.empty((T, p))
    last = prev_phi[0]
    for t in range(T):
        rhs = data_rhs[t] + ridge * (hp.gamma2 * prev_phi[t] + hp.gamma3 * last)
        phi[t] = np.linalg.solve(grams[t], rhs)
        last = phi[t]
    return phi


# ------------------------------------------------------------------ fit

def _check_finite(arrs, what):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite value produced by {what}")


def fit(dataset: MultiStateDataset, hp: HyperParams, p_graph: StateGraph | None = None,
        channel_graphs: ChannelGraphSet | None = None,
        progress: Callable[[int, float], None] | None = None) -> BBModel:
    """Run the alternating fit.

    ``p_graph`` defaults to the categorical graph with ``c = 1``; channel
    graphs are built from the data when not supplied. Stops after
    ``hp.max_iter`` iterations or once the total error changes by less than
    ``hp.conv_tol`` (relative) over ``hp.conv_window`` iterations.
    """
    rng = np.random.default_rng(hp.seed)
    if p_graph is None:
        p_graph = categorical_p(dataset.n_states, 1.0)
    if p_graph.n_states != dataset.n_states:
        raise ValueError("state graph size does not match dataset")
    if channel_graphs is None:
        channel_graphs = build_channel_graphs(dataset, p_graph, hp.sigma_h, hp.k)

    model = init_model(dataset, hp, rng)
    model.lambdas = update_lambda(model.bbs, channel_graphs, hp)
    model.history.append(trial_errors(model, dataset))
    if progress:
        progress(0, float(model.history[-1].sum()))

    for it in range(1, hp.max_iter + 1):
        for d in range(dataset.n_states):
            if hp.reset_lambda:
                model.lambdas[d] = np.full_like(model.bbs[d], hp.epsilon / max(hp.beta, 1e-300))
            for _ in range(hp.a_repeats):
                batch = sample_batch(rng, dataset.n_trials(d), hp.batch_size)
                update_A_state(model, dataset, d, channel_graphs, p_graph, hp, batch)
                _check_finite([model.bbs[d], model.lambdas[d]], f"update_A_state (state {d})")
            for m, tr in enumerate(dataset.states[d].trials):
                prev = model.traces[d][m]
                model.traces[d][m] = update_phi_trial(tr.values, tr.mask, model.bbs[d], prev, hp)
                _check_finite([model.traces[d][m]], f"update_phi_trial (state {d}, trial {m})")
        model.history.append(trial_errors(model, dataset))
        total = model.total_error
        if progress:
            progress(it, float(total[-1]))
        w = hp.conv_window
        if len(total) > w:
            ref = total[-1 - w]
            if ref > 0 and abs(total[-1] - ref) / ref < hp.conv_tol:
                break
            if ref == 0 and total[-1] == 0:
                break
    return model
