"""Ground-truth synthetic datasets: sparse BBs, trigonometric traces, and the
iterative validity checks that keep the problem non-degenerate."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MultiStateDataset, StateEntry, TrialObservation, save_dataset, write_matrix


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    n_channels: int = 100
    p: int = 10
    n_states: int = 3
    t_points: int = 300
    n_trig: int = 15
    corr_threshold: float = 0.6
    label_corr_threshold: float = 0.6
    contribution_threshold: float = 10.0
    trace_noise_sigma: float = 0.02
    max_cardinality: int = 21
    min_cardinality: int = 21
    freq_range: tuple = (0.0, 5.0)
    max_state_drops: int = 2
    noise_sigma: float = 0.0
    snr: float | None = None
    missing_fraction: float = 0.0
    extra_trig: int = 5
    contribution_noise: float = 0.1
    contribution_tries: int = 50
    max_rounds: int = 500

    def __post_init__(self):
        self.freq_range = tuple(float(v) for v in self.freq_range)
        for name in ("n_channels", "p", "n_states", "n_trig", "max_cardinality",
                     "min_cardinality"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.t_points < 2:
            raise ValueError("t_points must be >= 2")
        if not 1 <= self.min_cardinality <= self.max_cardinality <= self.n_channels:
            raise ValueError("need 1 <= min_cardinality <= max_cardinality <= n_channels")
        for name in ("corr_threshold", "label_corr_threshold", "contribution_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.missing_fraction < 1:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["freq_range"] = list(self.freq_range)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synth field(s): {', '.join(sorted(unknown))}")
        return cls(**raw)


@dataclass
class GroundTruth:
    base_a: np.ndarray
    per_state_a: list
    traces: list
    observations: MultiStateDataset
    clean: list


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _trig_sum(rng, n_terms, x, freq_range):
    out = np.zeros_like(x, dtype=float)
    for _ in range(n_terms):
        freq = rng.uniform(*freq_range)
        f = np.sin if rng.random() < 0.5 else np.cos
        sign = -1.0 if rng.random() < 0.5 else 1.0
        out += sign * f(freq * x)
    return out


def generate_traces(cfg: SynthConfig, seed=None) -> list:
    """One T x p trace matrix per state, each column a signed sum of random sines/cosines."""
    rng = _rng(seed)
    x = np.arange(1, cfg.t_points + 1, dtype=float)
    return [np.column_stack([_trig_sum(rng, cfg.n_trig, x, cfg.freq_range)
                             for _ in range(cfg.p)])
            for _ in range(cfg.n_states)]


def _corr(u, v):
    su, sv = u.std(), v.std()
    if su == 0 or sv == 0:
        return 0.0
    return float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))


def generate_base_bbs(cfg: SynthConfig, seed=None, max_attempts: int = 1000) -> np.ndarray:
    """Sparse nonnegative N x p matrix with pairwise column correlation <= threshold."""
    rng = _rng(seed)
    A = np.zeros((cfg.n_channels, cfg.p))
    for j in range(cfg.p):
        for _ in range(max_attempts):
            col = np.zeros(cfg.n_channels)
            size = rng.integers(cfg.min_cardinality, cfg.max_cardinality + 1)
            support = rng.choice(cfg.n_channels, size=size, replace=False)
            col[support] = 1.0 - rng.random(size)  # (0, 1]
            if all(_corr(col, A[:, i]) <= cfg.corr_threshold for i in range(j)):
                A[:, j] = col
                break
        else:
            raise GenerationError(
                f"column {j}: no draw met the correlation threshold in {max_attempts} attempts")
    return A


# ------------------------------------------------------------------ checks

def label_correlations(traces) -> np.ndarray:
    """Per BB, the time-averaged Pearson correlation between the cross-state
    trace values at each time point and the state labels 1..D."""
    stack = np.stack(traces)  # D x T x p
    D = stack.shape[0]
    if D < 2:
        return np.zeros(stack.shape[2])
    labels = np.arange(1, D + 1, dtype=float)
    lc = labels - labels.mean()
    centered = stack - stack.mean(axis=0, keepdims=True)
    num = np.einsum("d,dtp->tp", lc, centered) / D
    den = labels.std() * stack.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(den > 0, num / den, 0.0)
    return corr.mean(axis=0)


def _pairwise_corr(M) -> np.ndarray:
    Z = M - M.mean(axis=0)
    sd = M.std(axis=0)
    C = (Z.T @ Z) / M.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(np.outer(sd, sd) > 0, C / np.outer(sd, sd), 0.0)
    return C


def contributions(A, phi) -> np.ndarray:
    """``-||Y - a_j phi_j'||_F`` for each BB, with ``Y = A phi'``."""
    Y = A @ phi.T
    # ||Y - a phi'||^2 = ||Y||^2 - 2 a'Y phi + ||a||^2 ||phi||^2
    cross = np.einsum("nj,nj->j", A, Y @ phi)
    sq = (Y * Y).sum() - 2.0 * cross + (A * A).sum(axis=0) * (phi * phi).sum(axis=0)
    return -np.sqrt(np.maximum(sq, 0.0))


def check_report(a, traces, cfg: SynthConfig) -> dict:
    """Which of the four checks currently fail (True = violated)."""
    off = ~np.eye(cfg.p, dtype=bool)
    weak = np.abs(label_correlations(traces)) <= cfg.label_corr_threshold
    trace = any(np.any(np.abs(_pairwise_corr(t))[off] > cfg.corr_threshold) for t in traces)
    bb = bool(np.any(_pairwise_corr(a)[off] > cfg.corr_threshold))
    contrib = False
    for t in traces:
        c = contributions(a, t)
        if np.max(c) - np.min(c) > cfg.contribution_threshold:
            contrib = True
    label = np.count_nonzero(weak) < min(2, cfg.p)
    return {"label": bool(label), "trace": bool(trace), "bb": bb, "contribution": contrib}


def _contribution_excess(a, traces, threshold):
    """(D, p, p) array of how far each pairwise contribution gap exceeds the threshold."""
    out = []
    for t in traces:
        c = contributions(a, t)
        out.append(np.maximum(np.abs(c[:, None] - c[None, :]) - threshold, 0.0))
    return np.stack(out)


def _hard_threshold(col, size):
    out = np.zeros_like(col)
    keep = np.argsort(-np.abs(col), kind="stable")[:size]
    out[keep] = np.abs(col[keep])
    return out


def apply_checks(a, traces, cfg: SynthConfig, seed=None):
    """Repeat the four checks until a full pass changes nothing.

    Order per pass: label correlation, trace correlation, BB correlation,
    contribution balance. Returns adjusted copies.
    """
    rng = _rng(seed)
    a = np.array(a, dtype=float)
    traces = [np.array(t, dtype=float) for t in traces]
    p = a.shape[1]
    x = np.arange(1, traces[0].shape[0] + 1, dtype=float)
    sizes = np.count_nonzero(a, axis=0)
    failing = None
    for _ in range(cfg.max_rounds):
        modified = False

        # at least two BBs must be weakly related to the labels
        label = np.abs(label_correlations(traces)) > cfg.label_corr_threshold
        if np.count_nonzero(~label) < min(2, p):
            for j in np.flatnonzero(label):
                for t in traces:
                    t[:, j] += _trig_sum(rng, cfg.extra_trig, x, cfg.freq_range)
            modified = True
            failing = "label"

        for t in traces:
            for i in range(p):
                for j in range(i + 1, p):
                    n_tries = 0
                    while abs(_corr(t[:, i], t[:, j])) > cfg.corr_threshold:
                        t[:, i] += rng.normal(0.0, cfg.trace_noise_sigma, t.shape[0])
                        t[:, j] += rng.normal(0.0, cfg.trace_noise_sigma, t.shape[0])
                        modified = True
                        failing = "trace"
                        n_tries += 1
                        if n_tries > 200_000:
                            raise GenerationError("trace-correlation check did not settle")

        C = _pairwise_corr(a)
        for i in range(p):
            for j in range(i + 1, p):
                if C[i, j] > cfg.corr_threshold:
                    a[:, i] = a[rng.permutation(a.shape[0]), i]
                    a[:, j] = a[rng.permutation(a.shape[0]), j]
                    C = _pairwise_corr(a)
                    modified = True
                    failing = "bb"

        excess = _contribution_excess(a, traces, cfg.contribution_threshold)
        for d in range(len(traces)):
            for i in range(p):
                for j in range(i + 1, p):
                    if excess[d, i, j] <= 0:
                        continue
                    modified = True
                    failing = "contribution"
                    # random proposals, kept only when the total excess drops
                    for _ in range(cfg.contribution_tries):
                        trial = a.copy()
                        for col in (i, j):
                            noisy = trial[:, col] + rng.normal(0.0, cfg.contribution_noise,
                                                               a.shape[0])
                            trial[:, col] = _hard_threshold(noisy, sizes[col])
                        new_excess = _contribution_excess(trial, traces,
                                                          cfg.contribution_threshold)
                        if new_excess.sum() < excess.sum():
                            a, excess = trial, new_excess
                            break

        if not modified:
            return a, traces
    raise GenerationError(f"checks did not settle in {cfg.max_rounds} rounds "
                          f"(last failing check: {failing})")


def modify_per_state(base_a, cfg: SynthConfig, seed=None) -> list:
    """Per state and BB, zero out 0..max_state_drops of the base nonzeros."""
    rng = _rng(seed)
    out = []
    for _ in range(cfg.n_states):
        A = np.array(base_a, dtype=float)
        for j in range(A.shape[1]):
            nz = np.flatnonzero(A[:, j])
            n_drop = rng.integers(0, min(cfg.max_state_drops, max(len(nz) - 1, 0)) + 1)
            if n_drop:
                A[rng.choice(nz, size=n_drop, replace=False), j] = 0.0
        out.append(A)
    return out


def signal_std(clean) -> float:
    return float(np.concatenate([y.ravel() for y in clean]).std())


def generate(cfg: SynthConfig, seed=None) -> GroundTruth:
    rng = _rng(seed)
    traces = generate_traces(cfg, rng)
    base = generate_base_bbs(cfg, rng)
    base, traces = apply_checks(base, traces, cfg, rng)
    report = check_report(base, traces, cfg)
    if any(report.values()):
        raise GenerationError(f"post-check validation failed: {report}")
    per_state = modify_per_state(base, cfg, rng)
    clean = [A @ t.T for A, t in zip(per_state, traces)]

    noise_sigma = cfg.noise_sigma
    if cfg.snr is not None and np.isfinite(cfg.snr):
        noise_sigma = signal_std(clean) / cfg.snr
    states = []
    n_cells = cfg.n_channels * cfg.t_points
    n_missing = int(round(cfg.missing_fraction * n_cells))
    for d, y in enumerate(clean):
        obs = y.copy()
        if noise_sigma > 0:
            obs = obs + rng.normal(0.0, noise_sigma, obs.shape)
        mask = None
        if n_missing:
            flat = np.ones(n_cells, dtype=bool)
            flat[rng.choice(n_cells, size=n_missing, replace=False)] = False
            mask = flat.reshape(obs.shape)
            obs = np.where(mask, obs, 0.0)
        states.append(StateEntry(label=float(d + 1),
                                 trials=(TrialObservation(obs, mask),), id=str(d)))
    return GroundTruth(base, per_state, traces, MultiStateDataset(tuple(states)), clean)


def write_truth(truth: GroundTruth, out, cfg: SynthConfig | None = None, seed=None) -> None:
    """Dataset directory plus ``truth/A_state_<d>.csv`` and ``truth/phi_state_<d>.csv``."""
    out = Path(out)
    save_dataset(truth.observations, out)
    for d, (A, phi) in enumerate(zip(truth.per_state_a, truth.traces)):
        write_matrix(out / "truth" / f"A_state_{d}.csv", A)
        write_matrix(out / "truth" / f"phi_state_{d}.csv", phi)
    write_matrix(out / "truth" / "A_base.csv", truth.base_a)
    if cfg is not None:
        meta = {"synth": cfg.to_dict(), "seed": seed}
        with open(out / "truth" / "synth.meta.json", "w", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
