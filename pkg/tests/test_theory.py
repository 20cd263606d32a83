import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparelab.datagen import build_binary_dataset
from sparelab.model import TrainConfig
from sparelab.theory import (NetConfig, TheoryConfig, assumption_check, default_probe_steps, domination_ratio,
                             early_window, feasibility, feature_signed_counts, fit_slope_through_origin, kappa,
                             phase1_check, phase2_step, predicted_slopes, separability_score,
                             separability_trace, two_means_1d, two_means_minority_recall)


def test_windows():
    assert early_window(100, 0.05) == 22
    steps = default_probe_steps(100, 0.05)
    assert steps[0] == 1 and steps[-1] == 22 and steps == sorted(set(steps))
    assert phase2_step(100, 1.0) == round(100 * math.log(100))


def test_predicted_slopes_reference():
    ds = build_binary_dataset(seed=0)
    counts = feature_signed_counts(ds)
    assert counts == {"core:1": 1000.0, "core:-1": -1000.0, "spurious:A": 900.0, "spurious:B": -900.0}
    s = predicted_slopes(ds, 0.05, 0.5)
    assert s["core:1"] == pytest.approx(2 * 0.05 * 0.25 * 1 / 100 * 0.5)
    assert s["spurious:A"] == pytest.approx(2 * 0.05 * 0.25 * 4 / 100 * 0.45)


def test_kappa_zero_without_noise():
    ds = build_binary_dataset(core_sigma=0.0, spurious_sigma=0.0, seed=0)
    assert kappa(ds) == 0.0
    ds = build_binary_dataset(seed=0)
    expected = (math.sqrt(2 * 1000**2 * 0.01) + math.sqrt(2 * 900**2 * 0.01 * 4)) / 2000
    assert kappa(ds) == pytest.approx(expected)


def test_fit_slope_exact_line():
    assert fit_slope_through_origin([1, 2, 3], [2.5, 5.0, 7.5]) == pytest.approx(2.5)


def brute_two_means(v):
    s = np.sort(v)
    best = math.inf
    for cut in range(1, len(s)):
        cost = ((s[:cut] - s[:cut].mean()) ** 2).sum() + ((s[cut:] - s[cut:].mean()) ** 2).sum()
        best = min(best, cost)
    return best


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=40, unique=True))
def test_two_means_optimal(values):
    v = np.array(values)
    a = two_means_1d(v)
    cost = sum(((v[a == k] - v[a == k].mean()) ** 2).sum() for k in (True, False) if np.any(a == k))
    assert cost <= brute_two_means(v) + 1e-7 * (1 + abs(brute_two_means(v)))


def test_separability_noiseless_and_recall():
    out = np.array([1.0, 1.0, 1.0, -1.0, -3.0, -3.0, -3.0, 2.0])
    labels = np.array([1, 1, 1, 1, -1, -1, -1, -1])
    maj = np.array([1, 1, 1, 0, 1, 1, 1, 0], bool)
    assert separability_score(out, labels, maj) == {-1: 1.0, 1: 1.0}
    assert two_means_minority_recall(out, labels, maj) == {-1: 1.0, 1: 1.0}


def test_feasibility_notes():
    assert feasibility(2000, 2000, 100, 0.1) == []
    assert feasibility(50, 2000, 100, 0.1)
    with pytest.raises(ValueError):
        TheoryConfig(alpha=0.3)


def test_domination_ratio_zero_core():
    assert domination_ratio(1.0, 0.0) == math.inf


@pytest.fixture(scope="module")
def small_ds():
    return build_binary_dataset(d=40, majority=190, minority=10, ambient_sigma=1.0, seed=0)


def test_assumption_gaps_start_at_zero(small_ds):
    rep = assumption_check(small_ds, NetConfig(400, "relu", 1), TrainConfig(eta=0.05), steps=5)
    assert rep.steps == [0, 1, 2, 3, 4, 5]
    assert max(rep.train_gap[0], rep.core_gap[0], rep.spurious_gap[0]) < 1e-14


def test_separability_zero_noise():
    ds = build_binary_dataset(d=40, majority=190, minority=10, core_sigma=0.0, spurious_sigma=0.0, seed=0)
    rows = separability_trace(ds, NetConfig(400, "relu", 1), TrainConfig(eta=0.05), [5])
    assert all(r[2] == 1.0 and r[3] == 1.0 for r in rows)


def test_phase1_small(small_ds):
    rep = phase1_check(small_ds, NetConfig(1000, "relu", 1), TrainConfig(eta=0.05),
                       TheoryConfig(separability_step=14))
    assert set(rep.relative_errors) == {"core:1", "core:-1", "spurious:A", "spurious:B"}
    assert max(rep.relative_errors.values()) < 0.5
    assert 14 in rep.separability
