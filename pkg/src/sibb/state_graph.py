"""State-similarity graphs over the D states of a dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .data import MultiStateDataset

log = logging.getLogger(__name__)

TINY = np.finfo(float).tiny


class VariantMismatchError(ValueError):
    """The dataset or labels do not fit the requested graph construction."""


@dataclass(frozen=True)
class StateGraph:
    values: np.ndarray
    variant: str
    params: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.values.shape[0]


def _numeric_labels(labels):
    out = []
    for lab in labels:
        if isinstance(lab, str):
            raise VariantMismatchError(
                f"categorical label {lab!r} cannot be used with the supervised Gaussian "
                "graph; use categorical_p instead")
        out.append(np.atleast_1d(np.asarray(lab, dtype=float)).ravel())
    dims = {v.shape for v in out}
    if len(dims) != 1:
        raise VariantMismatchError(f"labels have mixed dimensions {sorted(dims)}")
    return np.vstack(out)


def _gaussian(sq_dist, sigma):
    if not sigma > 0:
        raise ValueError("sigma_p must be positive")
    # the kernel is strictly positive; keep it so when exp underflows
    return np.maximum(np.exp(-sq_dist / sigma ** 2), TINY)


def supervised_p(labels, sigma_p: float) -> StateGraph:
    """Gaussian kernel on numeric state labels (scalars or equal-length vectors)."""
    L = _numeric_labels(labels)
    diff = L[:, None, :] - L[None, :, :]
    P = _gaussian(np.einsum("ijk,ijk->ij", diff, diff), sigma_p)
    P = 0.5 * (P + P.T)
    np.fill_diagonal(P, 1.0)
    return StateGraph(P, "supervised", {"sigma_p": float(sigma_p)})


def categorical_p(n_states: int, c: float = 1.0) -> StateGraph:
    """All-ones graph plus ``c`` on the diagonal."""
    if n_states < 1:
        raise ValueError("need at least one state")
    if c < 0:
        raise ValueError("c must be nonnegative")
    P = np.ones((n_states, n_states)) + c * np.eye(n_states)
    return StateGraph(P, "categorical", {"c": float(c)})


def datadriven_p_single_equal(dataset: MultiStateDataset, sigma_p: float) -> StateGraph:
    """Gaussian kernel on Frobenius distances between single, equal-length trials."""
    D = dataset.n_states
    if any(dataset.n_trials(d) != 1 for d in range(D)):
        raise VariantMismatchError(
            "gaussian-single needs exactly one trial per state; use the Procrustes "
            "(procrustes-multi) or DTW variant")
    shapes = {dataset.trial(d, 0).values.shape for d in range(D)}
    if len(shapes) != 1:
        raise VariantMismatchError(
            "gaussian-single needs equal trial lengths; use the DTW variant")
    Y = np.stack([dataset.trial(d, 0).values.ravel() for d in range(D)])
    sq = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)
    P = _gaussian(sq, sigma_p)
    P = 0.5 * (P + P.T)
    np.fill_diagonal(P, 1.0)
    return StateGraph(P, "gaussian-single", {"sigma_p": float(sigma_p)})


def orthogonal_procrustes(source, target) -> np.ndarray:
    """Orthogonal ``psi`` (M_j x M_i) minimizing ``||psi @ source - target||_F``.

    With ``U S V' = svd(target @ source')`` the minimizer is ``U V'``; for
    non-square maps the columns (or rows) are orthonormal on the smaller side.
    """
    source = np.atleast_2d(np.asarray(source, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if source.shape[1] != target.shape[1]:
        raise ValueError(
            f"column count mismatch: source has {source.shape[1]}, target {target.shape[1]}")
    u, _, vt = np.linalg.svd(target @ source.T, full_matrices=False)
    return u @ vt


def _flatten_trials(dataset, d):
    # row-major over (time, channel): trial Y is N x T, so flatten Y.T
    return np.stack([tr.values.T.ravel() for tr in dataset.states[d].trials])


def datadriven_p_multi_equal(dataset: MultiStateDataset, sigma_p: float) -> StateGraph:
    """Procrustes-aligned Gaussian kernel for multi-trial states of equal length.

    The raw (i, j) entry aligns state i's stacked trials onto state j's; the
    raw matrix is not symmetric, so it is averaged with its transpose and the
    diagonal pinned to 1.
    """
    lengths = {tr.n_times for _, _, tr in dataset.iter_trials()}
    if len(lengths) != 1:
        raise VariantMismatchError(
            "procrustes-multi needs equal trial lengths; use the DTW variant")
    D = dataset.n_states
    stacked = [_flatten_trials(dataset, d) for d in range(D)]
    raw = np.ones((D, D))
    for i in range(D):
        for j in range(D):
            if i == j:
                continue
            psi = orthogonal_procrustes(stacked[i], stacked[j])
            resid = psi @ stacked[i] - stacked[j]
            raw[i, j] = _gaussian(np.sum(resid ** 2), sigma_p)
    P = 0.5 * (raw + raw.T)
    np.fill_diagonal(P, 1.0)
    return StateGraph(P, "procrustes-multi", {"sigma_p": float(sigma_p)})


@numba.njit(cache=True)
def _dtw(x, y):
    n, m = x.shape[0], y.shape[0]
    prev = np.full(m + 1, np.inf)
    prev[0] = 0.0
    cur = np.empty(m + 1)
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(x[i - 1] - y[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(x, y) -> float:
    """Classic DTW: absolute-difference cost, steps (1,0), (0,1), (1,1)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise ValueError("DTW needs non-empty sequences")
    return float(_dtw(x, y))


def _mean_channel_dtw(trials_i, trials_j):
    n = trials_i[0].shape[0]
    total = 0.0
    for ch in range(n):
        acc = 0.0
        for yi in trials_i:
            for yj in trials_j:
                acc += _dtw(yi[ch], yj[ch])
        total += acc / (len(trials_i) * len(trials_j))
    return total / n


def datadriven_p_dtw(dataset: MultiStateDataset, scale: float = 1.0) -> StateGraph:
    """``exp(-mean channel DTW / scale)``; handles ragged durations and trial counts.

    With one trial per state this is the plain channel-averaged DTW; with
    several, every cross-state trial pair is averaged per channel.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    D = dataset.n_states
    trials = [[np.ascontiguousarray(tr.values) for tr in st.trials] for st in dataset.states]
    P = np.ones((D, D))
    for i in range(D):
        for j in range(i + 1, D):
            P[i, j] = P[j, i] = max(np.exp(-_mean_channel_dtw(trials[i], trials[j]) / scale), TINY)
    return StateGraph(P, "dtw", {"scale": float(scale)})


def build_state_graph(variant: str, dataset: MultiStateDataset, *, sigma_p=None,
                      c=None, scale=1.0) -> StateGraph:
    """Dispatch on the variant name used in run configs."""
    if variant == "supervised":
        return supervised_p(dataset.labels, sigma_p)
    if variant == "categorical":
        return categorical_p(dataset.n_states, 1.0 if c is None else c)
    if variant == "gaussian-single":
        return datadriven_p_single_equal(dataset, sigma_p)
    if variant == "procrustes-multi":
        return datadriven_p_multi_equal(dataset, sigma_p)
    if variant == "dtw":
        return datadriven_p_dtw(dataset, scale)
    raise ValueError(f"unknown state-graph variant {variant!r}")
