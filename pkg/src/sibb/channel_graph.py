"""Per-state channel-similarity kernels and their post-processing chain.

raw Gaussian kernel -> cross-state re-weighting by P -> kNN -> symmetrize
-> row-normalize, in that order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import MultiStateDataset, hconcat_observations
from .state_graph import StateGraph

log = logging.getLogger(__name__)


class DegenerateGraphError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelGraphSet:
    kernels: tuple
    k: int
    sigma_h: float

    def __getitem__(self, d):
        return self.kernels[d]

    def __len__(self):
        return len(self.kernels)


def pairwise_sq_distances(y, observed=None) -> np.ndarray:
    """Squared Euclidean distances between rows of ``y``.

    With an ``observed`` mask, missing entries are zero-filled and every
    distance is rescaled by ``total columns / jointly observed columns``.
    """
    y = np.asarray(y, dtype=float)
    if observed is None or observed.all():
        sq = np.sum(y ** 2, axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * (y @ y.T)
        np.maximum(dist, 0.0, out=dist)
        np.fill_diagonal(dist, 0.0)
        return dist
    obs = observed.astype(float)
    yf = np.where(observed, y, 0.0)
    # sum over jointly observed columns of (y_i - y_j)^2
    sq = yf ** 2
    dist = sq @ obs.T + obs @ sq.T - 2.0 * (yf @ yf.T)
    np.maximum(dist, 0.0, out=dist)
    joint = obs @ obs.T
    total = y.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(joint > 0, dist * (total / joint), np.inf)
    np.fill_diagonal(dist, 0.0)
    return dist


def raw_channel_graph(y_star, sigma_h: float, observed=None) -> np.ndarray:
    """Gaussian kernel between channel rows of the concatenated observations."""
    if not sigma_h > 0:
        raise ValueError("sigma_h must be positive")
    H = np.exp(-pairwise_sq_distances(y_star, observed) / sigma_h ** 2)
    return 0.5 * (H + H.T)


def median_bandwidth(dataset: MultiStateDataset) -> float:
    """Median nonzero pairwise channel distance, pooled over states."""
    vals = []
    for d in range(dataset.n_states):
        y, obs = hconcat_observations(dataset, d)
        dist = pairwise_sq_distances(y, obs)
        iu = np.triu_indices_from(dist, k=1)
        v = dist[iu]
        vals.append(v[np.isfinite(v) & (v > 0)])
    pooled = np.concatenate(vals) if vals else np.array([])
    if pooled.size == 0:
        return 1.0
    return float(np.sqrt(np.median(pooled)))


def reweight_across_states(raw, p_graph: StateGraph | np.ndarray):
    """Average each state's kernel with all others, weighted by the P row.

    The division by the P row sum only rescales rows uniformly, so it has no
    effect after the final row normalization; it is kept for fidelity.
    """
    P = p_graph.values if isinstance(p_graph, StateGraph) else np.asarray(p_graph)
    raw = [np.asarray(h, dtype=float) for h in raw]
    if P.shape != (len(raw), len(raw)):
        raise ValueError(f"P is {P.shape} but there are {len(raw)} kernels")
    stack = np.stack(raw)
    out = []
    for d in range(len(raw)):
        norm = np.abs(P[d]).sum()
        if norm == 0:
            raise DegenerateGraphError(f"state graph row {d} is all zero")
        out.append(np.tensordot(P[d], stack, axes=1) / norm)
    return out


def knn_sparsify(kernel, k: int, keep_self: bool = False) -> np.ndarray:
    """Keep the ``k`` largest entries of each row; ties go to the lower column.

    With ``keep_self`` the diagonal entry always survives: if it is not among
    the top ``k`` it replaces the smallest kept entry.
    """
    H = np.asarray(kernel, dtype=float)
    n = H.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated row keeps lower column indices first among ties
    order = np.argsort(-H, axis=1, kind="stable")[:, :k]
    if keep_self:
        rows = np.arange(n)
        has_self = (order == rows[:, None]).any(axis=1)
        missing = np.flatnonzero(~has_self)
        if missing.size:
            log.debug("self-edge outside top-%d for %d rows; retained anyway", k, missing.size)
            order[missing, -1] = missing
    out = np.zeros_like(H)
    np.put_along_axis(out, order, np.take_along_axis(H, order, axis=1), axis=1)
    return out


def finalize(kernel) -> np.ndarray:
    """Symmetrize, then scale each row to sum to one."""
    H = np.asarray(kernel, dtype=float)
    H = 0.5 * (H + H.T)
    sums = H.sum(axis=1)
    if np.any(sums <= 0):
        bad = np.flatnonzero(sums <= 0)
        raise DegenerateGraphError(f"rows {bad.tolist()} have no positive entries")
    return H / sums[:, None]


def build_channel_graphs(dataset: MultiStateDataset, p_graph: StateGraph,
                         sigma_h: float | None, k: int) -> ChannelGraphSet:
    """Full chain for every state; ``sigma_h=None`` picks the median bandwidth."""
    if sigma_h is None:
        sigma_h = median_bandwidth(dataset)
    k = int(min(k, dataset.channel_count))
    raw = []
    for d in range(dataset.n_states):
        y, obs = hconcat_observations(dataset, d)
        raw.append(raw_channel_graph(y, sigma_h, obs))
    kernels = [finalize(knn_sparsify(h, k, keep_self=True))
               for h in reweight_across_states(raw, p_graph)]
    return ChannelGraphSet(tuple(kernels), k, float(sigma_h))
