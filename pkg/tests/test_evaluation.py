import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cltv import evaluation as ev
from cltv.forest import ForestConfig
from cltv.sgns import SgnsConfig

from oracles import concordance_auc, naive_rmse, naive_spearman


def random_case(rng, n):
    scores = rng.integers(0, 20, size=n) / 4.0          # plenty of ties
    labels = rng.random(n) < 0.4
    labels[0], labels[1] = True, False
    return scores, labels


def test_auc_matches_concordance_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s, y = random_case(rng, int(rng.integers(2, 200)))
        assert ev.auc(s, y) == pytest.approx(float(concordance_auc(s, y)), abs=1e-12)


def test_auc_trivial_cases():
    assert ev.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert ev.auc([0.9, 0.1], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        ev.auc([0.1, 0.2], [1, 1])


def test_spearman_and_rmse_oracles():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(3, 200))
        x = rng.integers(0, 10, size=n).astype(float)
        y = x + rng.integers(-3, 4, size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert ev.spearman(x, y) == pytest.approx(naive_spearman(x, y), abs=1e-12)
        assert ev.rmse(x, y) == pytest.approx(naive_rmse(x, y), abs=1e-12)


def test_spearman_edges():
    assert ev.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert ev.spearman([1, 2, 3], [3, 2, 1]) == -1.0
    with pytest.raises(ValueError):
        ev.spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=4, max_size=60), st.integers(0, 2**31))
def test_rank_metrics_invariant_under_monotone_maps(xs, seed):
    s = np.array(xs, dtype=float)
    rng = np.random.default_rng(seed)
    y = rng.random(s.size) < 0.5
    y[:2] = [True, False]
    f = lambda v: np.exp(v / 50.0) * 3 + 1
    assert ev.auc(f(s), y) == pytest.approx(ev.auc(s, y), abs=1e-12)
    t = rng.random(s.size)
    if np.ptp(s) > 0:
        assert ev.spearman(f(s), t) == pytest.approx(ev.spearman(s, t), abs=1e-12)


def test_calibration_bins_partition():
    rng = np.random.default_rng(2)
    p = rng.random(1003)
    y = rng.random(1003) < p
    bins = ev.calibration_bins(p, y, 10)
    assert len(bins) == 10 and sum(b.count for b in bins) == 1003
    assert bins[0].lower == 0.0 and bins[-1].upper == 1.0
    assert all(a.upper == b.lower for a, b in zip(bins, bins[1:]))
    assert max(b.count for b in bins) - min(b.count for b in bins) <= 1
    assert ev.expected_calibration_error(p, y) < 0.06


def test_ece_of_constant_miscalibration():
    p = np.linspace(0.7, 0.9, 100)
    assert ev.expected_calibration_error(p, np.ones(100)) == pytest.approx(0.2)


def test_t_interval():
    mean, lo, hi = ev.t_interval([1.0, 2.0, 3.0, 4.0])
    assert mean == 2.5
    half = 3.182446305284263 * np.std([1, 2, 3, 4], ddof=1) / 2
    assert (lo, hi) == pytest.approx((2.5 - half, 2.5 + half))
    assert ev.t_interval([5.0]) == (5.0, 5.0, 5.0)


def test_report_outputs(tmp_path):
    bins = ev.calibration_bins(np.linspace(0, 1, 50), np.arange(50) % 2, 5)
    r = ev.MetricReport(0.75, 0.5, 0.1, bins, 50, {"ece_raw": 0.02})
    r.write(tmp_path / "r.json", tmp_path / "r.txt")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["auc"] == 0.75 and len(d["calibration_bins"]) == 5
    assert "ece_raw" in (tmp_path / "r.txt").read_text()
    ev.write_calibration_csv(tmp_path / "c.csv", bins)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 6


def test_identical_feature_sets_give_zero_uplift(small_log):
    events, _, split = small_log
    cfg = ev.UpliftConfig(sgns=SgnsConfig(dim=8, epochs=1),
                          forest=ForestConfig(n_trees=5, max_depth=4, min_samples_leaf=10),
                          test_size=150, use_embeddings=False)
    res = ev.uplift_experiment(events, split, cfg, n_seeds=5)
    assert res.uplift == [0.0] * 5
    assert res.mean == 0.0 and res.ci_low == res.ci_high == 0.0


def test_uplift_rejects_few_seeds(small_log):
    events, _, split = small_log
    with pytest.raises(ValueError):
        ev.uplift_experiment(events, split, n_seeds=3)
