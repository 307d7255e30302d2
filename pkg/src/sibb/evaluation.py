"""Recovery metrics against ground truth and within/between-state trace statistics."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import MultiStateDataset
from .trainer import BBModel, reconstruct


def pearson(u, v) -> float:
    """Pearson correlation with population standard deviations; 0 when either is constant."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    su, sv = u.std(), v.std()
    if su == 0 or sv == 0:
        warnings.warn("zero-variance trace; correlation set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))


def _corr_matrix(X, Y) -> np.ndarray:
    """Column-by-column Pearson correlations between X (n x p) and Y (n x q)."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    sx, sy = X.std(axis=0), Y.std(axis=0)
    C = (Xc.T @ Yc) / X.shape[0]
    denom = np.outer(sx, sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, C / denom, 0.0)


def _est_traces(est):
    # first trial of each state
    if isinstance(est, BBModel):
        return [st[0] for st in est.traces]
    return [np.asarray(t) for t in est]


def _truth_traces(truth):
    return [np.asarray(t) for t in getattr(truth, "traces", truth)]


def match_components(est, truth) -> np.ndarray:
    """Optimal assignment of estimated BBs to true BBs by trace correlation.

    Traces are concatenated across states; the assignment maximizes the sum
    of correlations (Hungarian algorithm). ``perm[i]`` is the true index
    matched to estimated BB ``i``.
    """
    E = np.vstack(_est_traces(est))
    G = np.vstack(_truth_traces(truth))
    if E.shape[1] != G.shape[1]:
        raise ValueError(f"BB count mismatch: estimate has {E.shape[1]}, truth {G.shape[1]}")
    return optimal_assignment(_corr_matrix(E, G))


def optimal_assignment(C) -> np.ndarray:
    """Permutation maximizing ``sum_i C[i, perm[i]]`` (Hungarian algorithm)."""
    C = np.asarray(C, dtype=float)
    rows, cols = linear_sum_assignment(C, maximize=True)
    perm = np.empty(C.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def jaccard_score(est_a, true_a, nullify_percentile: float = 15.0) -> np.ndarray:
    """Per-column Jaccard index of supports after zeroing the low-magnitude tail.

    Entries of ``est_a`` below the given percentile of ``|est_a|`` (pooled
    over the whole matrix) are zeroed before binarizing. Columns must
    already be matched. Two empty supports score 1.
    """
    est = np.abs(np.asarray(est_a, dtype=float))
    true = np.asarray(true_a, dtype=float)
    thr = np.percentile(est, nullify_percentile)
    est_bin = (est >= thr) & (est != 0)
    true_bin = true != 0
    inter = np.count_nonzero(est_bin & true_bin, axis=0)
    union = np.count_nonzero(est_bin | true_bin, axis=0)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def trace_correlation(est, truth, perm) -> np.ndarray:
    """(D, p) correlations between each true trace and its matched estimate."""
    E = _est_traces(est)
    G = _truth_traces(truth)
    inv = np.argsort(perm)  # true index -> estimated index
    out = np.empty((len(G), G[0].shape[1]))
    for d, (e, g) in enumerate(zip(E, G)):
        for j in range(g.shape[1]):
            out[d, j] = pearson(e[:, inv[j]], g[:, j])
    return out


def _aligned_pair(u, v):
    if len(u) == len(v):
        return u, v
    n = min(len(u), len(v))
    grid = np.linspace(0.0, 1.0, n)
    return (np.interp(grid, np.linspace(0.0, 1.0, len(u)), u),
            np.interp(grid, np.linspace(0.0, 1.0, len(v)), v))


def within_between_ratio(model: BBModel, n_boot: int = 100, seed=None):
    """Mean same-state over mean cross-state trace correlation, per BB.

    Each of ``n_boot`` draws picks a random pair of distinct trials from one
    state (within) and a random trial from each of two distinct states
    (between). Traces of different length are linearly resampled to the
    shorter one. Returns ``(ratio, within_mean, between_mean, resampled)``.
    """
    rng = np.random.default_rng(seed)
    traces = model.traces
    multi = [d for d, st in enumerate(traces) if len(st) >= 2]
    if not multi:
        raise ValueError("within-state correlation needs a state with at least 2 trials")
    if len(traces) < 2:
        raise ValueError("between-state correlation needs at least 2 states")
    p = traces[0][0].shape[1]
    within = np.zeros(p)
    between = np.zeros(p)
    resampled = False
    for _ in range(n_boot):
        d = multi[rng.integers(len(multi))]
        m1, m2 = rng.choice(len(traces[d]), size=2, replace=False)
        d1, d2 = rng.choice(len(traces), size=2, replace=False)
        b1 = rng.integers(len(traces[d1]))
        b2 = rng.integers(len(traces[d2]))
        for j in range(p):
            u, v = _aligned_pair(traces[d][m1][:, j], traces[d][m2][:, j])
            within[j] += _quiet_corr(u, v)
            x, y = _aligned_pair(traces[d1][b1][:, j], traces[d2][b2][:, j])
            between[j] += _quiet_corr(x, y)
            resampled |= len(traces[d][m1]) != len(traces[d][m2])
            resampled |= len(traces[d1][b1]) != len(traces[d2][b2])
    within /= n_boot
    between /= n_boot
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(between != 0, within / between, np.inf)
    return ratio, within, between, resampled


def _quiet_corr(u, v):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return pearson(u, v)


def reconstruction_mse(model: BBModel, dataset: MultiStateDataset) -> np.ndarray:
    """Mean squared error over observed entries, one value per trial (state-major)."""
    out = []
    for d, m, tr in dataset.iter_trials():
        resid = (tr.values - reconstruct(model, d, m))[tr.observed]
        out.append(float(np.mean(resid ** 2)) if resid.size else 0.0)
    return np.array(out)


@dataclass
class EvalReport:
    permutation: list
    per_bb_trace_corr: list
    per_bb_jaccard: list
    mse: list = field(default_factory=list)
    within_between_ratio: list | None = None
    matching: str = "hungarian (optimal assignment on trace correlations)"
    flags: list = field(default_factory=list)

    @property
    def median_trace_corr(self) -> float:
        return float(np.median(self.per_bb_trace_corr))

    @property
    def median_jaccard(self) -> float:
        return float(np.median(self.per_bb_jaccard))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["median_trace_corr"] = self.median_trace_corr
        out["median_jaccard"] = self.median_jaccard
        return out


def evaluate(model: BBModel, truth, dataset: MultiStateDataset | None = None,
             nullify_percentile: float = 15.0, n_boot: int = 100, seed=0) -> EvalReport:
    """Match, then score traces, supports, reconstruction and state separation."""
    perm = match_components(model, truth)
    inv = np.argsort(perm)
    corr = trace_correlation(model, truth, perm)
    jac = np.stack([jaccard_score(model.bbs[d][:, inv], truth.per_state_a[d], nullify_percentile)
                    for d in range(len(truth.per_state_a))])
    flags = []
    mse = []
    if dataset is not None:
        mse = reconstruction_mse(model, dataset).tolist()
    ratio = None
    if any(len(st) >= 2 for st in model.traces) and len(model.traces) >= 2:
        r, _, _, resampled = within_between_ratio(model, n_boot, seed)
        ratio = r[inv].tolist()
        if resampled:
            flags.append("within/between: unequal trial lengths linearly resampled")
    return EvalReport(perm.tolist(), corr.tolist(), jac.tolist(), mse, ratio, flags=flags)

