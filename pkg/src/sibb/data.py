"""Ragged multi-state, multi-trial observation container and its on-disk format.

A dataset directory looks like::

    manifest.json
    states/<id>/trial_0.csv
    states/<id>/trial_0.mask.csv   (optional, 0/1 entries)

``manifest.json`` holds ``{"channels": N, "states": [{"id", "label", "trials"}]}``.
Trial CSVs are N rows by T columns, comma separated, no header.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised when a dataset directory or in-memory dataset is malformed."""


@dataclass(frozen=True)
class TrialObservation:
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DatasetError(f"trial must be a 2-D matrix, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 2:
            raise DatasetError(f"trial needs N >= 1 and T >= 2, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != values.shape:
                raise DatasetError(
                    f"mask shape {mask.shape} does not match values shape {values.shape}")
            if not np.all((mask == 0) | (mask == 1)):
                raise DatasetError("mask entries must be 0 or 1")
            object.__setattr__(self, "mask", mask.astype(bool))

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean matrix, True where the sample is observed."""
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.mask

    @property
    def missing_fraction(self) -> float:
        if self.mask is None:
            return 0.0
        return float(np.count_nonzero(~self.mask)) / self.mask.size


@dataclass(frozen=True)
class StateEntry:
    label: object
    trials: tuple
    id: str = ""


@dataclass(frozen=True)
class MultiStateDataset:
    states: tuple
    channel_count: int = field(default=0)

    def __post_init__(self):
        states = tuple(self.states)
        if len(states) < 1:
            raise DatasetError("dataset needs at least one state")
        n = None
        fixed = []
        for d, st in enumerate(states):
            trials = tuple(st.trials)
            if len(trials) < 1:
                raise DatasetError(f"state {d} has no trials")
            for tr in trials:
                if n is None:
                    n = tr.n_channels
                elif tr.n_channels != n:
                    raise DatasetError(
                        f"state {d}: trial has {tr.n_channels} channels, expected {n}")
            fixed.append(StateEntry(label=st.label, trials=trials, id=st.id or str(d)))
        if self.channel_count and self.channel_count != n:
            raise DatasetError(f"channel_count={self.channel_count} but trials have {n} rows")
        _check_labels([s.label for s in fixed])
        object.__setattr__(self, "states", tuple(fixed))
        object.__setattr__(self, "channel_count", n)

    @classmethod
    def from_arrays(cls, trials_per_state: Sequence[Sequence[np.ndarray]],
                    labels: Sequence | None = None,
                    masks: Sequence[Sequence[np.ndarray | None]] | None = None,
                    ids: Sequence[str] | None = None) -> "MultiStateDataset":
        """Build a dataset from nested lists of ``N x T`` arrays."""
        states = []
        for d, trials in enumerate(trials_per_state):
            state_masks = masks[d] if masks is not None else [None] * len(trials)
            obs = tuple(TrialObservation(np.asarray(y, dtype=float), m)
                        for y, m in zip(trials, state_masks))
            label = labels[d] if labels is not None else d
            sid = ids[d] if ids is not None else str(d)
            states.append(StateEntry(label=label, trials=obs, id=sid))
        return cls(tuple(states))

    @property
    def n_states(self) -> int:
        return len(self.states)

    def n_trials(self, d: int) -> int:
        return len(self.states[d].trials)

    def trial(self, d: int, m: int) -> TrialObservation:
        return self.states[d].trials[m]

    @property
    def labels(self) -> list:
        return [s.label for s in self.states]

    @property
    def state_ids(self) -> list[str]:
        return [s.id for s in self.states]

    def iter_trials(self):
        for d, st in enumerate(self.states):
            for m, tr in enumerate(st.trials):
                yield d, m, tr


def _check_labels(labels):
    dims = set()
    for lab in labels:
        if isinstance(lab, str):
            continue
        arr = np.atleast_1d(np.asarray(lab, dtype=float))
        dims.add(arr.shape)
    if len(dims) > 1:
        raise DatasetError(f"vector labels have inconsistent dimensions: {sorted(dims)}")


def hconcat_observations(dataset: MultiStateDataset, d: int,
                         trials: Sequence[int] | None = None):
    """Concatenate the trials of state ``d`` along time.

    Returns ``(Y, observed)`` with shapes ``N x sum(T_m)``; trial order is
    preserved (``trials`` selects a subset, in the given order).
    """
    if not 0 <= d < dataset.n_states:
        raise IndexError(f"state index {d} out of range [0, {dataset.n_states})")
    idx = range(dataset.n_trials(d)) if trials is None else trials
    obs = [dataset.trial(d, m) for m in idx]
    y = np.concatenate([o.values for o in obs], axis=1)
    mask = np.concatenate([o.observed for o in obs], axis=1)
    return y, mask


def vconcat_traces(model, d: int, trials: Sequence[int] | None = None) -> np.ndarray:
    """Stack the per-trial traces of state ``d`` along time (rows)."""
    if not 0 <= d < len(model.traces):
        raise IndexError(f"state index {d} out of range [0, {len(model.traces)})")
    traces = model.traces[d]
    idx = range(len(traces)) if trials is None else trials
    picked = []
    for m in idx:
        if not 0 <= m < len(traces):
            raise DatasetError(f"state {d} has {len(traces)} traces, no trial {m}")
        picked.append(traces[m])
    return np.concatenate(picked, axis=0)


# ---------------------------------------------------------------- disk format

def write_matrix(path, matrix, fmt="%.17g"):
    """Write a matrix as plain decimal CSV; ``%.17g`` round-trips float64 exactly."""
    matrix = np.atleast_2d(np.asarray(matrix))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for row in matrix:
            fh.write(",".join(fmt % v for v in row))
            fh.write("\n")


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        with open(path, newline=None) as fh:
            arr = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"non-numeric content in {path}: {exc}") from None
    return arr


def _label_to_json(label):
    if isinstance(label, str):
        return label
    arr = np.asarray(label, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    return arr.tolist()


def _label_from_json(raw):
    if isinstance(raw, str):
        return raw
    if isinstance(raw, list):
        return np.asarray(raw, dtype=float)
    return float(raw)


def load_dataset(path) -> MultiStateDataset:
    """Load a dataset directory (see module docstring)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        n = int(manifest["channels"])
        state_entries = manifest["states"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from None

    states = []
    for entry in state_entries:
        trials = []
        for rel in entry["trials"]:
            trial_path = root / rel
            values = read_matrix(trial_path)
            if values.shape[0] != n:
                raise DatasetError(
                    f"{trial_path}: {values.shape[0]} rows but manifest says {n} channels")
            mask_path = trial_path.with_name(trial_path.stem + ".mask.csv")
            mask = None
            if mask_path.is_file():
                mask = read_matrix(mask_path)
                if mask.shape != values.shape:
                    raise DatasetError(
                        f"{mask_path}: shape {mask.shape} does not match trial {values.shape}")
            try:
                trials.append(TrialObservation(values, mask))
            except DatasetError as exc:
                raise DatasetError(f"{trial_path}: {exc}") from None
        states.append(StateEntry(label=_label_from_json(entry.get("label", len(states))),
                                 trials=tuple(trials), id=str(entry["id"])))
    return MultiStateDataset(tuple(states), channel_count=n)


def save_dataset(dataset: MultiStateDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    state_entries = []
    for st in dataset.states:
        rels = []
        for m, tr in enumerate(st.trials):
            rel = f"states/{st.id}/trial_{m}.csv"
            write_matrix(root / rel, tr.values)
            if tr.mask is not None:
                write_matrix(root / f"states/{st.id}/trial_{m}.mask.csv",
                             tr.mask.astype(int), fmt="%d")
            rels.append(rel)
        state_entries.append({"id": st.id, "label": _label_to_json(st.label), "trials": rels})
    manifest = {"channels": dataset.channel_count, "states": state_entries}
    with open(root / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def env_threads() -> int:
    """Worker cap from ``SIBB_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("SIBB_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)
