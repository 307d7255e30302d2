"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured values
before asserting, so ``pytest -v -s`` (or the tee'd log) reads as a report.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sibb import cli
from sibb.channel_graph import build_channel_graphs
from sibb.data import MultiStateDataset
from sibb.evaluation import evaluate
from sibb.solvers import CoupledLassoProblem, Coupling, nnls, solve_coupled_lasso
from sibb.state_graph import build_state_graph, categorical_p, dtw_distance
from sibb.synth import SynthConfig, generate
from sibb.trainer import HyperParams, fit, update_lambda

from oracles import dtw_enumerate, lasso_grid, nnls_projected_gradient, random_lasso_problem

pytestmark = pytest.mark.slow

SEEDS = range(5)
REPEATS = 5


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")


def _median_over_repeats(axis, value, value_idx, field):
    cfg = cli.RunConfig(hyperparams=HyperParams(max_iter=200), synth=SynthConfig())
    rows = [cli.run_sweep_cell(cfg, axis, value, value_idx, r, seed=0) for r in range(REPEATS)]
    bad = [r["status"] for r in rows if r["status"] != "ok"]
    assert not bad, bad
    return float(np.median([r[field] for r in rows]))


def test_1_ground_truth_recovery(capsys):
    corr, jac = [], []
    for seed in SEEDS:
        g = generate(SynthConfig(), seed)
        model = fit(g.observations, HyperParams(max_iter=200, seed=seed))
        rep = evaluate(model, g)
        corr += list(np.ravel(rep.per_bb_trace_corr))
        jac += list(np.ravel(rep.per_bb_jaccard))
    mc, mj = float(np.median(corr)), float(np.median(jac))
    ok = mc >= 0.90 and mj >= 0.70
    report(capsys, 1, "ground-truth recovery", ok,
           f"median trace corr {mc:.4f} (>= 0.90), median Jaccard {mj:.4f} (>= 0.70), "
           f"{len(SEEDS)} seeds")
    assert ok


def test_2_noise_robustness(capsys):
    snrs = [np.inf, 10.0, 5.0, 3.0]
    med = [_median_over_repeats("noise", v, i, "median_trace_corr") for i, v in enumerate(snrs)]
    gap = med[0] - med[-1]
    steps = np.diff(med)
    ok = gap <= 0.15 and bool(np.all(steps <= 0.03))
    report(capsys, 2, "noise robustness", ok,
           "median corr by SNR " + ", ".join(f"{s:g}: {m:.4f}" for s, m in zip(snrs, med))
           + f"; drop at SNR 3 {gap:.4f} (<= 0.15); max rise {steps.max():.4f} (<= 0.03)")
    assert ok


def test_3_missing_sample_robustness(capsys):
    fracs = [0.0, 0.05, 0.10]
    med = [_median_over_repeats("missing", v, i, "median_jaccard") for i, v in enumerate(fracs)]
    gap = med[0] - med[-1]
    ok = gap <= 0.15
    report(capsys, 3, "missing-sample robustness", ok,
           "median Jaccard by missing fraction "
           + ", ".join(f"{f:g}: {m:.4f}" for f, m in zip(fracs, med))
           + f"; drop at 10% {gap:.4f} (<= 0.15)")
    assert ok


def test_4_solver_oracles(capsys):
    rng = np.random.default_rng(2024)
    lasso_err = 0.0
    for _ in range(50):
        y, X, lam, couplings = random_lasso_problem(rng)
        ref = lasso_grid(y, X, lam, couplings)
        prob = CoupledLassoProblem(y, X, lam, [Coupling(w, a, s) for w, a, s in couplings])
        lasso_err = max(lasso_err, float(np.max(np.abs(solve_coupled_lasso(prob).coef - ref))))
    nnls_err = 0.0
    for _ in range(50):
        A, b = rng.normal(size=(5, 3)), rng.normal(size=5)
        nnls_err = max(nnls_err, float(np.max(np.abs(nnls(A, b).x - nnls_projected_gradient(A, b)))))
    dtw_bad = 0
    for _ in range(100):
        x = rng.normal(size=rng.integers(1, 7))
        y = rng.normal(size=rng.integers(1, 7))
        dtw_bad += dtw_distance(x, y) != dtw_enumerate(x, y)
    ok = lasso_err <= 2e-3 and nnls_err <= 1e-6 and dtw_bad == 0
    report(capsys, 4, "solver oracles", ok,
           f"lasso max coord err {lasso_err:.2e} (<= 2e-3, 50 problems); NNLS max err "
           f"{nnls_err:.2e} (<= 1e-6, 50 problems); DTW mismatches {dtw_bad}/100 (exact)")
    assert ok


def test_5_graph_invariants(capsys):
    rng = np.random.default_rng(5)
    worst_row, p_ok, n_graphs = 0.0, True, 0
    for i in range(20):
        D = int(rng.integers(2, 5))
        max_trials = 1 if i % 2 == 0 else 3
        n = int(rng.integers(3, 15))
        T = int(rng.integers(3, 10))
        trials = [[0.3 * rng.normal(size=(n, T)) for _ in range(int(rng.integers(1, max_trials + 1)))]
                  for _ in range(D)]
        ds = MultiStateDataset.from_arrays(trials, labels=[float(d) for d in range(D)])
        for variant in ("supervised", "categorical", "procrustes-multi", "dtw"):
            P = build_state_graph(variant, ds, sigma_p=2.0, c=1.0, scale=5.0).values
            if variant == "categorical":
                p_ok &= np.array_equal(P, np.ones((D, D)) + np.eye(D))
            else:
                p_ok &= np.array_equal(P, P.T) and np.array_equal(np.diag(P), np.ones(D))
            H = build_channel_graphs(ds, build_state_graph(variant, ds, sigma_p=2.0, c=1.0,
                                                           scale=5.0), None, int(rng.integers(1, n + 1)))
            for h in H.kernels:
                worst_row = max(worst_row, float(np.max(np.abs(h.sum(axis=1) - 1.0))))
                n_graphs += 1
        if all(len(t) == 1 for t in trials):
            P = build_state_graph("gaussian-single", ds, sigma_p=2.0).values
            p_ok &= np.array_equal(P, P.T) and np.array_equal(np.diag(P), np.ones(D))
    ok = worst_row <= 1e-10 and bool(p_ok)
    report(capsys, 5, "graph invariants", ok,
           f"max |row sum - 1| {worst_row:.1e} over {n_graphs} H kernels (<= 1e-10); "
           f"P symmetric/unit-diagonal/categorical pattern: {bool(p_ok)}")
    assert ok


def test_6_training_sanity(capsys):
    g = generate(SynthConfig(), 0)
    model = fit(g.observations, HyperParams())
    err = model.total_error
    ratio = err[-1] / err[0]
    # moving median over iterations i-4..i, for i > 10
    mm = np.array([np.median(err[i - 4:i + 1]) for i in range(10, len(err))])
    rises = np.diff(mm)
    n_up = int(np.sum(rises > 0))
    ok = ratio <= 0.1 and n_up == 0
    report(capsys, 6, "training sanity", ok,
           f"final/initial error {ratio:.4f} (<= 0.1); 5-iteration moving median rose at "
           f"{n_up} of {len(rises)} steps after iteration 10 (largest rise "
           f"{max(rises.max(), 0):.3g} on error {err[-1]:.3g}); {len(err) - 1} iterations")
    assert ok


def _digest(root):
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_7_determinism(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hyperparams": {"max_iter": 10},
                               "sweep": {"axis": "missing", "values": [0.05], "repeats": 1}}))
    data = tmp_path / "data"
    assert cli.main(["synth", "--seed", "11", "--out", str(data), "--quiet"]) == 0
    commands = {
        "synth": ["synth", "--config", str(cfg), "--seed", "11"],
        "fit": ["fit", "--data", str(data), "--config", str(cfg), "--seed", "11"],
        "graphs": ["graphs", "--data", str(data), "--config", str(cfg)],
        "sweep": ["sweep", "--config", str(cfg), "--seed", "11"],
    }
    same = {}
    for name, argv in commands.items():
        outs = [str(tmp_path / f"{name}{i}") for i in range(2)]
        for o in outs:
            assert cli.main(argv + ["--out", o, "--quiet"]) == 0
        same[name] = _digest(outs[0]) == _digest(outs[1])
    reports = []
    for i in range(2):
        path = tmp_path / f"eval{i}" / "report.json"
        assert cli.main(["eval", "--est", str(tmp_path / "fit0"), "--truth", str(data),
                         "--data", str(data), "--seed", "11", "--out", str(path),
                         "--quiet"]) == 0
        reports.append(_digest(path.parent))
    same["eval"] = reports[0] == reports[1]
    ok = all(same.values())
    report(capsys, 7, "determinism", ok,
           ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok


def test_8_lambda_unit_check(capsys):
    hp = HyperParams()
    ds = generate(SynthConfig(), 0).observations
    H = build_channel_graphs(ds, categorical_p(ds.n_states), hp.sigma_h, hp.k)
    lams = update_lambda([np.zeros((ds.channel_count, hp.p))] * ds.n_states, H, hp)
    err = max(float(np.max(np.abs(lam - 1 / 9))) for lam in lams)
    ok = err <= 4 * np.finfo(float).eps
    report(capsys, 8, "lambda unit check", ok, f"max |lambda - 1/9| = {err:.1e} with A = 0")
    assert ok
