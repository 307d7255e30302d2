import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sibb.data import MultiStateDataset
from sibb.state_graph import (VariantMismatchError, build_state_graph, categorical_p,
                              datadriven_p_dtw, datadriven_p_multi_equal,
                              datadriven_p_single_equal, dtw_distance, orthogonal_procrustes,
                              supervised_p)

from oracles import dtw_enumerate

short_seq = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6)


def _check_gaussian_invariants(P):
    np.testing.assert_array_equal(P, P.T)
    np.testing.assert_array_equal(np.diag(P), 1.0)
    assert np.all(P > 0) and np.all(P <= 1)


# ---------------------------------------------------------------- supervised

def test_supervised_equal_labels():
    assert supervised_p([2.0, 2.0], 1.0).values[0, 1] == 1.0


def test_supervised_unit_distance():
    assert supervised_p([0.0, 1.0], 1.0).values[0, 1] == pytest.approx(np.exp(-1), abs=1e-15)


def test_supervised_circle_labels_adjacent_beat_opposite():
    ang = np.deg2rad(np.arange(0, 360, 45))
    P = supervised_p([np.array([np.cos(a), np.sin(a)]) for a in ang], 1.0).values
    for i in range(8):
        assert P[i, (i + 1) % 8] > P[i, (i + 4) % 8]
    _check_gaussian_invariants(P)


def test_supervised_rejects_string_labels():
    with pytest.raises(VariantMismatchError, match="categorical"):
        supervised_p(["a", "b"], 1.0)


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6),
       st.floats(0.1, 10))
def test_supervised_invariants(labels, sigma):
    _check_gaussian_invariants(supervised_p(labels, sigma).values)


def test_far_labels_stay_positive():
    assert supervised_p([0.0, 100.0], 0.1).values[0, 1] > 0


# ---------------------------------------------------------------- categorical

def test_categorical_three_states():
    np.testing.assert_array_equal(categorical_p(3, 1.0).values,
                                  [[2, 1, 1], [1, 2, 1], [1, 1, 2]])


def test_categorical_degenerate():
    np.testing.assert_array_equal(categorical_p(4, 0.0).values, np.ones((4, 4)))
    np.testing.assert_array_equal(categorical_p(1, 5.0).values, [[6.0]])
    with pytest.raises(ValueError):
        categorical_p(3, -1.0)


# ---------------------------------------------------------------- gaussian-single

def test_single_identical_states():
    y = np.random.default_rng(0).normal(size=(3, 5))
    ds = MultiStateDataset.from_arrays([[y], [y.copy()]])
    assert datadriven_p_single_equal(ds, 1.0).values[0, 1] == 1.0


def test_single_hand_value():
    ds = MultiStateDataset.from_arrays([[np.array([[0.0, 0.0]])], [np.array([[1.0, 1.0]])]])
    P = datadriven_p_single_equal(ds, np.sqrt(2)).values
    assert P[0, 1] == pytest.approx(np.exp(-1), rel=1e-14)


def test_single_bandwidth_monotone():
    rng = np.random.default_rng(1)
    ds = MultiStateDataset.from_arrays([[rng.normal(size=(2, 4)) * 0.3] for _ in range(3)])
    a = datadriven_p_single_equal(ds, 1.0).values
    b = datadriven_p_single_equal(ds, 3.0).values
    off = ~np.eye(3, dtype=bool)
    assert np.all(b[off] > a[off])


def test_single_rejects_multi_trial_and_ragged():
    rng = np.random.default_rng(2)
    with pytest.raises(VariantMismatchError, match="procrustes-multi"):
        datadriven_p_single_equal(MultiStateDataset.from_arrays(
            [[rng.normal(size=(2, 3))] * 2, [rng.normal(size=(2, 3))]]), 1.0)
    with pytest.raises(VariantMismatchError, match="DTW"):
        datadriven_p_single_equal(MultiStateDataset.from_arrays(
            [[rng.normal(size=(2, 3))], [rng.normal(size=(2, 4))]]), 1.0)


# ---------------------------------------------------------------- Procrustes

def test_procrustes_identity():
    x = np.random.default_rng(3).normal(size=(4, 4))
    psi = orthogonal_procrustes(x, x)
    assert np.linalg.norm(psi @ x - x) < 1e-10


def test_procrustes_recovers_rotation():
    rng = np.random.default_rng(4)
    source = rng.normal(size=(3, 4))
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    psi = orthogonal_procrustes(source, R @ source)
    assert np.linalg.norm(psi @ source - R @ source) < 1e-10
    np.testing.assert_allclose(psi, R, atol=1e-10)


@given(st.integers(0, 10_000))
def test_procrustes_orthogonal(seed):
    rng = np.random.default_rng(seed)
    psi = orthogonal_procrustes(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)))
    np.testing.assert_allclose(psi.T @ psi, np.eye(4), atol=1e-12)


def test_procrustes_column_mismatch():
    with pytest.raises(ValueError):
        orthogonal_procrustes(np.zeros((2, 3)), np.zeros((2, 4)))


def test_multi_identical_states():
    rng = np.random.default_rng(5)
    trials = [rng.normal(size=(3, 4)) for _ in range(2)]
    ds = MultiStateDataset.from_arrays([trials, [t.copy() for t in trials]])
    P = datadriven_p_multi_equal(ds, 1.0).values
    assert P[0, 1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(np.diag(P), 1.0)


def test_multi_matches_independent_pipeline():
    rng = np.random.default_rng(6)
    s1 = [rng.normal(size=(2, 4)) for _ in range(2)]
    s2 = [t.copy() for t in s1]
    for t in s2:
        t[1] += 1.0
    ds = MultiStateDataset.from_arrays([s1, s2])
    got = datadriven_p_multi_equal(ds, 2.0).values[0, 1]

    def flat(trials):
        return np.stack([np.concatenate([y[:, t] for t in range(y.shape[1])]) for y in trials])

    def entry(src, dst):
        omega, _ = scipy.linalg.orthogonal_procrustes(src.T, dst.T)
        return np.exp(-np.sum((src.T @ omega - dst.T) ** 2) / 4.0)

    f1, f2 = flat(s1), flat(s2)
    want = 0.5 * (entry(f1, f2) + entry(f2, f1))
    assert got == pytest.approx(want, abs=1e-10)


def test_multi_rejects_ragged():
    rng = np.random.default_rng(7)
    with pytest.raises(VariantMismatchError, match="DTW"):
        datadriven_p_multi_equal(MultiStateDataset.from_arrays(
            [[rng.normal(size=(2, 3))], [rng.normal(size=(2, 5))]]), 1.0)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_multi_invariants(seed, n_states, n_trials):
    rng = np.random.default_rng(seed)
    ds = MultiStateDataset.from_arrays(
        [[0.2 * rng.normal(size=(2, 3)) for _ in range(n_trials)] for _ in range(n_states)])
    _check_gaussian_invariants(datadriven_p_multi_equal(ds, 2.0).values)


# ---------------------------------------------------------------- DTW

def test_dtw_trivial():
    assert dtw_distance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert dtw_distance([0.0], [1.0]) == 1.0


def test_dtw_small_case_matches_enumeration():
    assert dtw_distance([1, 2, 3], [1, 3]) == dtw_enumerate([1, 2, 3], [1, 3])


@given(short_seq, short_seq)
def test_dtw_matches_enumeration(x, y):
    assert dtw_distance(x, y) == pytest.approx(dtw_enumerate(x, y), abs=1e-9)


@given(short_seq, short_seq)
def test_dtw_symmetric_nonnegative(x, y):
    d = dtw_distance(x, y)
    assert d >= 0 and d == pytest.approx(dtw_distance(y, x), abs=1e-12)


def test_dtw_empty_rejected():
    with pytest.raises(ValueError):
        dtw_distance([], [1.0])


def test_dtw_graph_identical_states():
    y = np.random.default_rng(8).normal(size=(3, 5))
    P = datadriven_p_dtw(MultiStateDataset.from_arrays([[y], [y.copy()]])).values
    np.testing.assert_array_equal(P, np.ones((2, 2)))


def test_dtw_graph_hand_value():
    ds = MultiStateDataset.from_arrays([[np.array([[0.0, 0.0]])], [np.array([[1.0, 1.0]])]])
    assert datadriven_p_dtw(ds).values[0, 1] == pytest.approx(np.exp(-2), rel=1e-14)


def test_dtw_graph_multi_trial_identical():
    y = np.random.default_rng(9).normal(size=(2, 4))
    ds = MultiStateDataset.from_arrays([[y, y.copy()], [y.copy(), y.copy(), y.copy()]])
    np.testing.assert_array_equal(datadriven_p_dtw(ds).values, np.ones((2, 2)))


def test_dtw_graph_ragged_symmetric():
    rng = np.random.default_rng(10)
    ds = MultiStateDataset.from_arrays([[rng.normal(size=(2, 3))], [rng.normal(size=(2, 6))],
                                        [rng.normal(size=(2, 4)), rng.normal(size=(2, 5))]])
    P = datadriven_p_dtw(ds, scale=5.0).values
    np.testing.assert_array_equal(P, P.T)
    np.testing.assert_array_equal(np.diag(P), 1.0)
    assert np.all((P > 0) & (P <= 1))


# ---------------------------------------------------------------- dispatcher

def test_dispatch_variants():
    rng = np.random.default_rng(11)
    ds = MultiStateDataset.from_arrays([[0.1 * rng.normal(size=(2, 3))] for _ in range(3)],
                                       labels=[0.0, 1.0, 2.0])
    for name in ("supervised", "gaussian-single", "procrustes-multi", "dtw"):
        g = build_state_graph(name, ds, sigma_p=1.0)
        assert g.variant == name
        _check_gaussian_invariants(g.values)
    np.testing.assert_array_equal(build_state_graph("categorical", ds, c=1.0).values,
                                  categorical_p(3, 1.0).values)
    with pytest.raises(ValueError):
        build_state_graph("nope", ds)
