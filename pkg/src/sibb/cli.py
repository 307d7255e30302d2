"""Command-line front end: synth, fit, eval, graphs and sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Progress goes to stderr, results only to files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel_graph import DegenerateGraphError, build_channel_graphs
from .data import DatasetError, env_threads, load_dataset, write_matrix
from .evaluation import evaluate, reconstruction_mse
from .modelio import load_model, load_truth, save_model, write_json
from .state_graph import VariantMismatchError, build_state_graph
from .synth import GenerationError, SynthConfig, generate, write_truth
from .trainer import HyperParams, NumericalError, fit

SCHEMA_VERSION = 1
VARIANTS = ("supervised", "categorical", "gaussian-single", "procrustes-multi", "dtw")
SWEEP_AXES = ("noise", "missing")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _check_type(section, name, value, default):
    """Reject values whose JSON type cannot stand in for the field default."""
    where = f"{section}.{name}"
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _build(cls, raw, section):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[name] = _check_type(section, name, value, default)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _sweep_value(v):
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"sweep.values: expected numbers, got {v!r}")
    return float(v)


@dataclass
class RunConfig:
    hyperparams: HyperParams = field(default_factory=HyperParams)
    p_variant: str = "categorical"
    c: float = 1.0
    dtw_scale: float = 1.0
    synth: SynthConfig | None = None
    sweep: dict | None = None
    nullify_percentile: float = 15.0
    n_boot: int = 100
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "hyperparams": self.hyperparams.to_dict(),
            "p_variant": self.p_variant,
            "variant_params": self.variant_params(),
            "synth": None if self.synth is None else self.synth.to_dict(),
            "sweep": None if self.sweep is None else {
                **self.sweep, "values": [v if math.isfinite(v) else "inf"
                                         for v in self.sweep["values"]]},
            "eval": {"nullify_percentile": self.nullify_percentile, "n_boot": self.n_boot},
        }

    def variant_params(self) -> dict:
        if self.p_variant in ("supervised", "gaussian-single", "procrustes-multi"):
            return {"sigma_p": self.hyperparams.sigma_p}
        if self.p_variant == "categorical":
            return {"c": self.c}
        return {"scale": self.dtw_scale}

    @classmethod
    def from_dict(cls, raw) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {"schema_version", "hyperparams", "p_variant", "variant_params", "synth",
                 "sweep", "eval"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {version!r}")
        hp = _build(HyperParams, raw.get("hyperparams", {}), "hyperparams")
        variant = raw.get("p_variant", "categorical")
        if variant not in VARIANTS:
            raise ConfigError(f"p_variant: {variant!r} is not one of {', '.join(VARIANTS)}")
        vp = raw.get("variant_params", {})
        if not isinstance(vp, dict):
            raise ConfigError("variant_params: expected an object")
        allowed = {"sigma_p", "c", "scale"}
        bad = sorted(set(vp) - allowed)
        if bad:
            raise ConfigError(f"variant_params: unknown field(s) {', '.join(bad)}")
        if "sigma_p" in vp:
            # also reachable through hyperparams; the variant block wins
            sigma = _check_type("variant_params", "sigma_p", vp["sigma_p"], 1.0)
            try:
                hp = dataclasses.replace(hp, sigma_p=sigma)
            except ValueError as exc:
                raise ConfigError(f"variant_params.sigma_p: {exc}") from None
        c = _check_type("variant_params", "c", vp.get("c", 1.0), 1.0)
        scale = _check_type("variant_params", "scale", vp.get("scale", 1.0), 1.0)
        if not scale > 0:
            raise ConfigError("variant_params.scale: must be positive")
        synth = raw.get("synth")
        synth = None if synth is None else _build(SynthConfig, synth, "synth")
        sweep = raw.get("sweep")
        if sweep is not None:
            if not isinstance(sweep, dict):
                raise ConfigError("sweep: expected an object")
            bad = sorted(set(sweep) - {"axis", "values", "repeats"})
            if bad:
                raise ConfigError(f"sweep: unknown field(s) {', '.join(bad)}")
            axis = sweep.get("axis")
            if axis not in SWEEP_AXES:
                raise ConfigError(f"sweep.axis: expected 'noise' or 'missing', got {axis!r}")
            values = sweep.get("values")
            if not isinstance(values, list) or not values:
                raise ConfigError("sweep.values: expected a non-empty list")
            values = [_sweep_value(v) for v in values]
            repeats = sweep.get("repeats", 1)
            if isinstance(repeats, bool) or not isinstance(repeats, int) or repeats < 1:
                raise ConfigError(f"sweep.repeats: expected a positive integer, got {repeats!r}")
            if axis == "noise" and any(not v > 0 for v in values):
                raise ConfigError("sweep.values: SNR values must be positive")
            if axis == "missing" and any(not 0 <= v < 1 for v in values):
                raise ConfigError("sweep.values: missing fractions must lie in [0, 1)")
            sweep = {"axis": axis, "values": values, "repeats": repeats}
        ev = raw.get("eval", {})
        if not isinstance(ev, dict):
            raise ConfigError("eval: expected an object")
        bad = sorted(set(ev) - {"nullify_percentile", "n_boot"})
        if bad:
            raise ConfigError(f"eval: unknown field(s) {', '.join(bad)}")
        pct = _check_type("eval", "nullify_percentile", ev.get("nullify_percentile", 15.0), 15.0)
        n_boot = _check_type("eval", "n_boot", ev.get("n_boot", 100), 100)
        if not 0 <= pct <= 100:
            raise ConfigError("eval.nullify_percentile: must lie in [0, 100]")
        if n_boot < 1:
            raise ConfigError("eval.n_boot: must be >= 1")
        return cls(hp, variant, c, scale, synth, sweep, pct, n_boot, version)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)


# ------------------------------------------------------------------ helpers

def _progress(quiet):
    if quiet:
        return None

    def report(it, err):
        print(f"iter {it:5d}  error {err:.6g}", file=sys.stderr, flush=True)
    return report


def _note(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr, flush=True)


def _graphs(dataset, cfg: RunConfig):
    hp = cfg.hyperparams
    P = build_state_graph(cfg.p_variant, dataset, sigma_p=hp.sigma_p, c=cfg.c,
                          scale=cfg.dtw_scale)
    H = build_channel_graphs(dataset, P, hp.sigma_h, hp.k)
    return P, H


def _with_seed(cfg: RunConfig, seed) -> RunConfig:
    if seed is None:
        return cfg
    out = copy.deepcopy(cfg)
    out.hyperparams = dataclasses.replace(out.hyperparams, seed=int(seed))
    return out


# ------------------------------------------------------------------ subcommands

def run_synth(args) -> int:
    cfg = load_config(args.config)
    scfg = cfg.synth or SynthConfig()
    seed = 0 if args.seed is None else args.seed
    _note(args, f"generating synthetic dataset (seed {seed})")
    truth = generate(scfg, seed)
    write_truth(truth, args.out, scfg, seed)
    return 0


def run_fit(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    dataset = load_dataset(args.data)
    P, H = _graphs(dataset, cfg)
    model = fit(dataset, cfg.hyperparams, P, H, progress=_progress(args.quiet))
    meta = {"config": cfg.to_dict(), "sigma_h_used": H.sigma_h, "k_used": H.k,
            "P": P.values.tolist()}
    save_model(model, args.out, dataset.state_ids, meta)
    return 0


def run_graphs(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    dataset = load_dataset(args.data)
    P, H = _graphs(dataset, cfg)
    out = Path(args.out)
    write_matrix(out / "P.csv", P.values)
    write_json(out / "P.meta.json", {"variant": P.variant, "params": P.params,
                                     "state_ids": list(dataset.state_ids)})
    for sid, h in zip(dataset.state_ids, H.kernels):
        write_matrix(out / f"H_{sid}.csv", h)
    write_json(out / "H.meta.json", {"sigma_h": H.sigma_h, "k": H.k,
                                     "state_ids": list(dataset.state_ids),
                                     "config": cfg.to_dict()})
    return 0


def run_eval(args) -> int:
    cfg = load_config(args.config)
    model, _ = load_model(args.est)
    truth = load_truth(args.truth)
    dataset = load_dataset(args.data) if args.data else None
    seed = 0 if args.seed is None else args.seed
    report = evaluate(model, truth, dataset, cfg.nullify_percentile, cfg.n_boot, seed)
    out = Path(args.out)
    write_json(out, report.to_dict())
    write_json(out.with_name(out.stem + ".meta.json"),
               {"config": cfg.to_dict(), "seed": seed})
    return 0


def cell_seeds(seed: int, value_idx: int, repeat: int) -> tuple[int, int]:
    """Generator and fit seeds for one sweep cell, independent of run order."""
    a, b = np.random.SeedSequence([int(seed), int(value_idx), int(repeat)]).generate_state(2)
    return int(a), int(b)


def cell_synth_config(base: SynthConfig, axis: str, value: float) -> SynthConfig:
    if axis == "noise":
        snr = None if math.isinf(value) else value
        return dataclasses.replace(base, snr=snr, noise_sigma=0.0 if snr is None else base.noise_sigma)
    return dataclasses.replace(base, missing_fraction=value)


def run_sweep_cell(cfg: RunConfig, axis: str, value: float, value_idx: int, repeat: int,
                   seed: int) -> dict:
    """Generate, fit and evaluate one (value, repeat) cell; never raises."""
    synth_seed, fit_seed = cell_seeds(seed, value_idx, repeat)
    row = {"axis_value": value, "repeat": repeat, "median_jaccard": math.nan,
           "median_trace_corr": math.nan, "mse": math.nan, "status": "ok"}
    try:
        scfg = cell_synth_config(cfg.synth or SynthConfig(), axis, value)
        truth = generate(scfg, synth_seed)
        hp = dataclasses.replace(cfg.hyperparams, seed=fit_seed)
        P, H = _graphs(truth.observations, cfg)
        model = fit(truth.observations, hp, P, H)
        rep = evaluate(model, truth, None, cfg.nullify_percentile, cfg.n_boot, fit_seed)
        row["median_jaccard"] = rep.median_jaccard
        row["median_trace_corr"] = rep.median_trace_corr
        row["mse"] = float(np.mean(reconstruction_mse(model, truth.observations)))
    except Exception as exc:  # recorded per row, the sweep goes on
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def _cell(job):
    return run_sweep_cell(*job)


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def run_sweep(args) -> int:
    cfg = load_config(args.config)
    if cfg.sweep is None:
        raise ConfigError("sweep: config has no sweep block")
    seed = cfg.hyperparams.seed if args.seed is None else args.seed
    axis, values, repeats = cfg.sweep["axis"], cfg.sweep["values"], cfg.sweep["repeats"]
    jobs = [(cfg, axis, v, vi, r, seed) for vi, v in enumerate(values) for r in range(repeats)]
    workers = min(env_threads(), len(jobs))
    _note(args, f"sweep over {axis}: {len(jobs)} cells on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_cell(job))
            _note(args, f"  {axis}={job[2]:g} repeat {job[4]}: {rows[-1]['status']}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["axis_value", "repeat", "median_jaccard", "median_trace_corr", "mse", "status"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "n_ok", "median_jaccard", "median_trace_corr", "median_mse"])
        for v in values:
            ok = [r for r in rows if r["axis_value"] == v and r["status"] == "ok"]
            med = [float(np.median([r[k] for r in ok])) if ok else math.nan
                   for k in ("median_jaccard", "median_trace_corr", "mse")]
            w.writerow([_fmt(v), len(ok)] + [_fmt(x) for x in med])
    write_json(out / "sweep.meta.json", {"config": cfg.to_dict(), "seed": seed})
    return 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sibb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        return p

    common(sub.add_parser("synth", help="generate a synthetic dataset with ground truth"),
           "output dataset directory").set_defaults(func=run_synth)
    p = common(sub.add_parser("fit", help="fit BBs and traces to a dataset"), "output directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=run_fit)
    p = common(sub.add_parser("graphs", help="build the state and channel graphs"),
               "output directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=run_graphs)
    p = common(sub.add_parser("eval", help="score a fitted model against ground truth"),
               "report JSON path")
    p.add_argument("--est", required=True, help="fit output directory")
    p.add_argument("--truth", required=True, help="synthetic dataset directory with truth/")
    p.add_argument("--data", help="dataset directory, adds reconstruction MSE")
    p.set_defaults(func=run_eval)
    common(sub.add_parser("sweep", help="noise or missing-sample robustness sweep"),
           "output directory").set_defaults(func=run_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, VariantMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, DegenerateGraphError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, GenerationError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # remaining validation failures come from inputs that load but do not fit together
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
