"""Disk format for fitted models and ground-truth bundles."""

from __future__ import annotations

import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .data import DatasetError, read_matrix, write_matrix
from .trainer import BBModel


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from None


def save_model(model: BBModel, out, state_ids, meta: dict | None = None) -> None:
    """Write per-state A, lambda and per-trial traces, plus history and metadata.

    ``history.csv`` has one row per recorded iteration: the iteration index,
    the total error, then the error of every trial in state-major order.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for d, sid in enumerate(state_ids):
        write_matrix(out / f"A_state_{sid}.csv", model.bbs[d])
        write_matrix(out / f"lambda_state_{sid}.csv", model.lambdas[d])
        for m, phi in enumerate(model.traces[d]):
            write_matrix(out / f"phi_state_{sid}_trial_{m}.csv", phi)
    cols = ["iteration", "total"] + [f"state_{sid}_trial_{m}"
                                      for d, sid in enumerate(state_ids)
                                      for m in range(len(model.traces[d]))]
    with open(out / "history.csv", "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for it, errs in enumerate(model.history):
            vals = [float(np.sum(errs))] + [float(e) for e in errs]
            fh.write(",".join([str(it)] + ["%.17g" % v for v in vals]) + "\n")
    info = dict(meta or {})
    info["state_ids"] = [str(s) for s in state_ids]
    info["trial_counts"] = [len(t) for t in model.traces]
    info["n_recorded_iterations"] = len(model.history)
    write_json(out / "model.meta.json", info)


def load_model(path) -> tuple[BBModel, dict]:
    """Inverse of :func:`save_model`; history is re-read from ``history.csv``."""
    root = Path(path)
    meta = read_json(root / "model.meta.json")
    try:
        ids = meta["state_ids"]
        counts = meta["trial_counts"]
    except KeyError as exc:
        raise DatasetError(f"{root / 'model.meta.json'}: missing key {exc}") from None
    bbs, lambdas, traces = [], [], []
    for sid, n_tr in zip(ids, counts):
        bbs.append(read_matrix(root / f"A_state_{sid}.csv"))
        lambdas.append(read_matrix(root / f"lambda_state_{sid}.csv"))
        traces.append([read_matrix(root / f"phi_state_{sid}_trial_{m}.csv")
                       for m in range(n_tr)])
    history = []
    hist_path = root / "history.csv"
    if hist_path.is_file():
        rows = read_matrix_with_header(hist_path)
        history = [row[2:] for row in rows]
    return BBModel(bbs, traces, lambdas, history), meta


def read_matrix_with_header(path) -> np.ndarray:
    with open(path) as fh:
        n_lines = sum(1 for line in fh if line.strip())
    if n_lines <= 1:
        return np.empty((0, 0))
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"non-numeric content in {path}: {exc}") from None


def load_truth(path):
    """Ground truth written by the generator: ``<dir>/truth/{A,phi}_state_<d>.csv``.

    Returns an object with ``per_state_a`` and ``traces`` (one trace matrix
    per state), which is all the recovery metrics need.
    """
    root = Path(path)
    tdir = root / "truth" if (root / "truth").is_dir() else root
    per_state_a, traces = [], []
    d = 0
    while (tdir / f"A_state_{d}.csv").is_file():
        per_state_a.append(read_matrix(tdir / f"A_state_{d}.csv"))
        traces.append(read_matrix(tdir / f"phi_state_{d}.csv"))
        d += 1
    if not per_state_a:
        raise DatasetError(f"missing file: {tdir / 'A_state_0.csv'}")
    return SimpleNamespace(per_state_a=per_state_a, traces=traces)
