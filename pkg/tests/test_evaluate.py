"""Transport distance, mismatch statistics, histograms and the warm-start study."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gridflow import acpf
from gridflow.datagen import generate_dataset
from gridflow.evaluate import (
    downstream_warmstart,
    evaluate_warmstart,
    fit_warmstart,
    histogram_counts,
    histogram_export,
    known_mask,
    mismatch_report,
    wasserstein1,
    write_downstream_csv,
    write_mismatch_csv,
    write_w1,
)


def _brute_force_w1(a, b):
    n = len(a)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = 1 + trial % 6
        a = rng.normal(size=(n, 4))
        b = rng.normal(size=(n, 4))
        w, plan = wasserstein1(a, b)
        assert abs(w - _brute_force_w1(a, b)) < 1e-10
        assert sorted(plan.cols) == list(range(n))
        gamma = plan.as_matrix()
        np.testing.assert_allclose(gamma.sum(axis=0), 1 / n)
        np.testing.assert_allclose(gamma.sum(axis=1), 1 / n)


def test_w1_examples():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(7, 3))
    w, plan = wasserstein1(d, d)
    assert w == 0.0 and list(plan.cols) == list(range(7))
    x, y = np.array([[0.0, 3.0]]), np.array([[4.0, 0.0]])
    assert wasserstein1(x, y)[0] == pytest.approx(5.0)
    with pytest.raises(ValueError, match="sizes"):
        wasserstein1(d, d[:5])
    with pytest.raises(ValueError, match="widths"):
        wasserstein1(d, d[:, :2])


def test_w1_metric_axioms():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b, c = (rng.normal(size=(8, 5)) for _ in range(3))
        ab, ba = wasserstein1(a, b)[0], wasserstein1(b, a)[0]
        assert abs(ab - ba) < 1e-12
        assert wasserstein1(a, c)[0] <= ab + wasserstein1(b, c)[0] + 1e-12
        assert wasserstein1(a, a[rng.permutation(8)])[0] == 0.0
        assert ab > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, 3), elements=st.floats(-100, 100)),
    arrays(np.float64, (n, 3), elements=st.floats(-100, 100)))))
def test_w1_bounded_by_identity_matching(pair):
    a, b = pair
    w = wasserstein1(a, b)[0]
    assert 0 <= w <= np.linalg.norm(a - b, axis=1).mean() + 1e-9


@pytest.fixture(scope="module")
def truth5(case5):
    return generate_dataset(case5, 40, seed=11)


def test_mismatch_ground_truth(truth5, case5):
    rep = mismatch_report(truth5, case5)
    assert np.all(np.abs(rep.mean_dp) <= 1e-8) and np.all(rep.std_dp <= 1e-8)
    assert np.all(np.abs(rep.mean_dq) <= 1e-8) and np.all(rep.std_dq <= 1e-8)


def test_mismatch_single_record(truth5, case5):
    x = truth5.data[:1].copy()
    x[0, 0] += 0.2
    rep = mismatch_report(x, case5)
    assert rep.mean_dp[0] == pytest.approx(0.2, abs=1e-8)
    assert rep.std_dp[0] == 0.0


def test_mismatch_moments_streaming_oracle(case5):
    rng = np.random.default_rng(3)
    x = generate_dataset(case5, 30, seed=12).data + rng.normal(0, 0.01, (30, 20))
    rep = mismatch_report(x, case5)
    h = acpf.equality_residual(x, case5)
    # Welford pass over records
    mean = np.zeros(10)
    m2 = np.zeros(10)
    for k, row in enumerate(h, start=1):
        delta = row - mean
        mean += delta / k
        m2 += delta * (row - mean)
    std = np.sqrt(m2 / len(h))
    np.testing.assert_allclose(np.r_[rep.mean_dp, rep.mean_dq], mean, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(np.r_[rep.std_dp, rep.std_dq], std, rtol=1e-12, atol=1e-15)


def test_mismatch_width_checked(case5):
    with pytest.raises(ValueError):
        mismatch_report(np.zeros((2, 8)), case5)


def test_histogram_examples():
    counts, edges = histogram_counts(np.full(9, 2.5), 1)
    assert list(counts) == [9]
    counts, edges = histogram_counts([], 4)
    assert list(counts) == [0, 0, 0, 0]
    with pytest.raises(ValueError):
        histogram_counts([1.0], 0)


def test_histogram_counting_oracle():
    rng = np.random.default_rng(4)
    values = rng.uniform(0, 1, 1000)
    values[:3] = [values.min(), values.max(), values.max()]
    counts, edges = histogram_counts(values, 13)
    expected = np.zeros(13, dtype=int)
    for v in values:
        for k in range(13):
            last = k == 12
            if edges[k] <= v < edges[k + 1] or (last and v == edges[k + 1]):
                expected[k] += 1
                break
    np.testing.assert_array_equal(counts, expected)
    assert counts.sum() == 1000


def test_histogram_export(tmp_path):
    path = tmp_path / "h.csv"
    histogram_export([0.0, 0.5, 1.0, 1.0], 2, path)
    lines = path.read_text().splitlines()
    assert lines == ["left,right,count", "0,0.5,1", "0.5,1,3"]


def test_known_mask(case5, two_bus):
    mask = known_mask(case5).reshape(4, 5)
    assert list(mask.sum(axis=0)) == [2] * 5
    assert mask[:, 1].tolist() == [True, True, False, False]   # PQ bus 2
    assert mask[:, 0].tolist() == [True, False, True, False]   # PV bus 1
    assert mask[:, 3].tolist() == [False, False, True, True]   # slack bus 4
    assert known_mask(two_bus).sum() == 4


def test_oracle_predictor_is_feasible(truth5, case5):
    mask = known_mask(case5)
    score = evaluate_warmstart(lambda known: truth5.data[:, ~mask], truth5, case5)
    assert score.mean_dp <= 1e-8 and score.mean_dq <= 1e-8


def test_predictor_learns_two_bus(two_bus):
    data = generate_dataset(two_bus, 200, seed=13)
    untrained = evaluate_warmstart(fit_warmstart(data, two_bus, seed=0, steps=0), data, two_bus)
    trained = evaluate_warmstart(fit_warmstart(data, two_bus, seed=0, steps=1500), data, two_bus)
    assert trained.mean_dp <= 0.1 * untrained.mean_dp
    assert trained.mean_dq <= 0.1 * untrained.mean_dq


def test_downstream_deterministic(truth5, case5, tmp_path):
    test = generate_dataset(case5, 20, seed=14)
    a = downstream_warmstart({"gt": truth5}, test, case5, seed=3, steps=50)
    b = downstream_warmstart({"gt": truth5}, test, case5, seed=3, steps=50)
    assert a.scores == b.scores
    write_downstream_csv(a, tmp_path / "downstream.csv")
    assert (tmp_path / "downstream.csv").read_text().startswith("source,mean_total_dp")
    single = downstream_warmstart(truth5, test, case5, seed=3, steps=50)
    assert single.scores["train"] == a.scores["gt"]


def test_report_writers(truth5, case5, tmp_path):
    x = truth5.data[:3].copy()
    x[:, 0] += 0.01
    rep = mismatch_report(x, case5)
    write_mismatch_csv(rep, tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert len(rows) == 6
    fields = rows[1].split(",")
    assert float(fields[5]) == pytest.approx(100 * float(fields[1]))
    write_w1(tmp_path / "w1.txt", 0.25, {"n": 3})
    assert (tmp_path / "w1.txt").read_text() == "0.25\nn=3\n"
