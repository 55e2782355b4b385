import numpy as np
import pytest

from cltv import forest
from cltv.calibration import (PlattModel, PredictionRecord, apply_calibration,
                              calibration_arrays, calibration_from_arrays, fit_percentile_value_map,
                              fit_platt, score_logit)
from cltv.errors import DataError
from cltv.evaluation import expected_calibration_error


def test_calibrated_scores_stay_calibrated():
    rng = np.random.default_rng(0)
    s = rng.random(100_000)
    y = rng.random(s.size) < s
    m = fit_platt(s, y)
    assert m.converged
    assert m.a == pytest.approx(1.0, abs=0.05) and m.b == pytest.approx(0.0, abs=0.05)
    assert expected_calibration_error(m(s), y) <= expected_calibration_error(s, y) + 1e-3


def test_uninformative_scores_collapse_to_base_rate():
    rng = np.random.default_rng(1)
    s = rng.random(10_000)
    y = rng.random(s.size) < 0.3
    m = fit_platt(s, y)
    assert abs(m.a) < 0.1
    assert np.all(np.abs(m(np.linspace(0.01, 0.99, 50)) - 0.3) < 0.03)


def test_separable_data_no_overflow():
    s = np.r_[np.zeros(50), np.ones(50)]
    m = fit_platt(s, s > 0.5)
    assert np.isfinite(m.a) and np.isfinite(m.b) and m.a > 0
    p = m(s)
    assert np.all((p > 0) & (p < 1))
    assert p[0] < 0.01 and p[-1] > 0.99


def test_identity_model():
    s = np.linspace(0.001, 0.999, 101)
    assert np.allclose(PlattModel(1.0, 0.0)(s), s, atol=1e-12)
    assert PlattModel(1.0, 0.0)(0.25) == pytest.approx(0.25)


def test_output_strictly_inside_unit_interval():
    p = PlattModel(50.0, 3.0)(np.array([0.0, 1.0, 0.5]))
    assert np.all((p > 0) & (p < 1))


def test_platt_input_checks():
    with pytest.raises(DataError):
        fit_platt(np.linspace(0, 1, 20), np.ones(20, dtype=bool))
    with pytest.raises(ValueError):
        fit_platt(np.linspace(0, 2, 20), np.arange(20) % 2)
    with pytest.raises(ValueError):
        fit_platt(np.full(5, 0.5), [0, 1, 0, 1, 0])


def test_score_logit_clips():
    z = score_logit([0.0, 0.5, 1.0])
    assert z[1] == 0.0 and np.isfinite(z).all() and z[0] == pytest.approx(-z[2], rel=1e-9)


def test_constant_values_single_leaf():
    x = np.random.default_rng(2).random(500)
    vm = fit_percentile_value_map(x, np.full(500, 42.0))
    assert vm.tree.n_nodes == 1
    assert vm(0.3) == 42.0 and vm.breakpoints().size == 0


def test_linear_target_aggregates():
    rng = np.random.default_rng(3)
    x = rng.random(5000)
    vm = fit_percentile_value_map(x, 100 * x)
    assert abs(vm(x).sum() / (100 * x).sum() - 1) < 0.01
    assert vm.is_monotone()
    assert vm.tree.depth <= 6 and vm.tree.n_samples[vm.tree.left == -1].min() >= 50


def test_zero_bottom_leaf_maps_zero():
    rng = np.random.default_rng(4)
    x = rng.random(2000)
    vm = fit_percentile_value_map(x, np.where(x < 0.4, 0.0, 500 * x))
    assert vm(0.0) == 0.0


def test_percentiles_clipped_to_unit_interval():
    x = np.random.default_rng(5).random(400)
    vm = fit_percentile_value_map(x, 10 * x)
    assert vm(-3.0) == vm(0.0) and vm(7.0) == vm(1.0)


def test_value_map_input_checks():
    with pytest.raises(ValueError):
        fit_percentile_value_map(np.linspace(0, 1, 60), np.ones(60))
    with pytest.raises(ValueError):
        fit_percentile_value_map(np.linspace(0, 1, 200), -np.ones(200))


def test_apply_calibration_scalar_and_vector():
    x = np.linspace(0, 1, 400)
    vm = fit_percentile_value_map(x, 10 * x)
    platt = PlattModel(1.0, 0.0)
    r = apply_calibration(platt, vm, 0.2, 0.9, "c1")
    assert isinstance(r, PredictionRecord) and r.customer_id == "c1"
    assert r.churn_prob_calibrated == pytest.approx(0.2) and r.cltv_value == vm(0.9)
    rs = apply_calibration(platt, vm, np.array([0.1, 0.7]), np.array([0.1, 0.2]), ["a", "b"])
    assert [x.customer_id for x in rs] == ["a", "b"]
    assert rs[0].cltv_value <= rs[1].cltv_value


def test_bundle_roundtrip():
    rng = np.random.default_rng(6)
    x = rng.random(1000)
    vm = fit_percentile_value_map(x, 50 * x ** 2)
    platt = fit_platt(x, rng.random(1000) < x)
    meta, arrays = calibration_arrays(platt, vm)
    # simulate a bundle that widened integer fields
    arrays = {k: (v.astype(np.int64) if v.dtype == np.uint64 else v) for k, v in arrays.items()}
    p2, vm2 = calibration_from_arrays(meta, arrays)
    assert p2 == platt
    assert np.array_equal(vm2(x), vm(x))
    assert isinstance(vm2.tree, forest.Tree)
