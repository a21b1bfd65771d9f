import json

import numpy as np
import pytest

from bidfit.consumer import materialize_bid, simulate
from bidfit.data import compute_weights, demo_dataset, feature_ranges
from bidfit.estimation import EstimationConfig, Normalizer, build_penalty_lp, estimate_step1
from bidfit.evaluation import metrics
from bidfit.robust import robust_margins, sample_check
from conftest import make_frame


@pytest.fixture(scope="module")
def month():
    frame, truth = demo_dataset(12, seed=4)
    return frame, truth


def small_config(**kw):
    return EstimationConfig(**{"n_blocks": 4, "forgetting": 1.0, **kw})


def test_hand_counts_t3_b1():
    frame = make_frame([0.1, 0.3, 0.2], [1.0, 2.0, 1.5])
    cfg = EstimationConfig(n_blocks=1, forgetting=0)
    pen = build_penalty_lp(frame, np.ones(3), cfg, feature_ranges(frame))
    size = lambda blocks, names: sum(blocks[n].size for n in names)
    v, c = pen.lp.var_blocks, pen.lp.con_blocks
    assert v["x"].size == 3
    assert size(v, ["e_plus", "e_minus"]) == 6
    assert size(v, ["lam_up", "lam_down"]) == 4
    assert size(v, ["psi_up", "psi_lo"]) == 6
    assert c["stationarity"].size == 3
    assert size(c, ["ramp_up", "ramp_down"]) == 4
    assert c["cap"].size == 3
    assert size(c, ["robust_bounds", "robust_nonneg", "robust_ramp"]) == 3
    assert "monotone" not in c


def test_zero_penalty_is_pure_fit(month):
    frame, _ = month
    res = estimate_step1(frame, small_config(penalty=0.0))
    assert res.penalty_term >= 0
    assert res.objective == pytest.approx(res.error_term, rel=1e-8, abs=1e-10)
    lp = build_penalty_lp(Normalizer.fit(frame).frame(frame), compute_weights(frame, 1.0),
                          small_config(penalty=0.0), feature_ranges(frame)).lp
    c = lp.arrays()[0]
    for name in ("psi_up", "psi_lo", "lam_up", "lam_down"):
        assert np.all(c[lp.index(name)] == 0)


@pytest.mark.parametrize("L", [0.05, 0.3])
def test_objective_decomposition(month, L):
    res = estimate_step1(month[0], small_config(penalty=L))
    assert res.error_term + L * res.penalty_term == pytest.approx(res.objective, rel=1e-8)


def test_penalty_is_complementarity_surrogate(month):
    res = estimate_step1(month[0], small_config(penalty=0.1))
    for family, diag in res.diagnostics.items():
        if isinstance(diag, dict) and "min_surrogate_minus_violation" in diag:
            assert diag["min_surrogate_minus_violation"] >= -1e-9, family


def test_error_nondecreasing_in_penalty(month):
    errors = [estimate_step1(month[0], small_config(penalty=L)).error_term
              for L in (0.0, 0.01, 0.1, 0.5, 2.0)]
    assert np.all(np.diff(errors) >= -1e-6 * (1 + max(errors)))


def test_one_of_error_parts_is_zero(month):
    res = estimate_step1(month[0], small_config(penalty=0.1))
    assert np.max(np.minimum(res.e_plus, res.e_minus)) <= 1e-6


def test_fitted_model_is_robust(month):
    res = estimate_step1(month[0], small_config(penalty=0.1))
    assert min(robust_margins(res.model, res.ranges).values()) >= -1e-6
    assert min(sample_check(res.model, res.ranges, 10_000, 0).values()) >= -1e-6
    assert res.ranges.contains(month[0].features)


@pytest.mark.parametrize("L", [0.01, 0.1, 1.0, 10.0])
def test_inelastic_load(L):
    # constant price and a steady temperature trend: the perfect fit needs no
    # flexibility, so no penalty either (ramps are the trend, r_up = -r_down)
    T = 72
    temp = 2.0 + 0.2 * np.arange(T)
    load = 5.0 + 2.0 * temp
    frame = make_frame(np.full(T, 0.12), load, temp[:, None], names=["temp"])
    res = estimate_step1(frame, EstimationConfig(n_blocks=2, penalty=L, forgetting=0))
    assert res.weighted_error <= 1e-6 * np.sum(load)
    bid = materialize_bid(res.model, temp[:, None])
    np.testing.assert_allclose(bid.pmin, load, atol=1e-5 * load.max())
    np.testing.assert_allclose(bid.pmax, load, atol=1e-5 * load.max())


def test_flexible_fit_beats_collapsed_model():
    frame, _ = demo_dataset(24, seed=5)
    train, test = frame.slice(0, 21 * 24), frame.slice(21 * 24, 24 * 24)

    def held_out_mape(L):
        model = estimate_step1(train, small_config(penalty=L)).model
        pred = np.concatenate([simulate(model, test.price[s], test.features[s]).total
                               for s in (slice(0, 24), slice(24, 48), slice(48, 72))])
        return metrics(pred, test.load).mape

    assert held_out_mape(0.1) < held_out_mape(10.0)


def test_asymmetric_weights(month):
    frame, _ = month
    sym = estimate_step1(frame, small_config(penalty=0.1))
    heavy = estimate_step1(frame, small_config(penalty=0.1, weight_up=5.0))
    w = sym.weights
    assert np.sum(w * heavy.e_plus) <= np.sum(w * sym.e_plus) + 1e-6
    assert heavy.weighted_error == pytest.approx(np.sum(w * (5 * heavy.e_plus + heavy.e_minus)))


def test_result_serialises(month, tmp_path):
    res = estimate_step1(month[0], small_config(penalty=0.1))
    path = tmp_path / "fit.json"
    res.save(path)
    data = json.loads(path.read_text())
    assert data["config"]["n_blocks"] == 4
    assert data["objective"]["total"] == pytest.approx(res.objective)
    assert len(data["model"]["utility"]) == 4


def test_normalizer_round_trip(month):
    frame, truth = month
    norm = Normalizer.fit(frame)
    back = norm.to_original(norm.to_normalized(truth))
    for name in ("utility", "utility_coef", "pmin_coef", "ramp_up_coef"):
        np.testing.assert_allclose(getattr(back, name), getattr(truth, name), atol=1e-12)
    assert back.pmax == pytest.approx(truth.pmax)


def test_config_validation():
    with pytest.raises(ValueError):
        EstimationConfig(n_blocks=0)
    with pytest.raises(ValueError):
        EstimationConfig(penalty=-1)
    with pytest.raises(ValueError):
        EstimationConfig(features={"bogus": [0]})
    cfg = EstimationConfig(features={"pmin": ["temp"]})
    np.testing.assert_array_equal(cfg.feature_mask("pmin", ["solar", "temp"]), [False, True])
    np.testing.assert_array_equal(cfg.feature_mask("pmax", ["solar", "temp"]), [True, True])


def test_excluded_features_stay_zero(month):
    frame, _ = month
    res = estimate_step1(frame, small_config(features={"utility": ["peak"], "ramp_up": []}))
    assert np.all(res.model.utility_coef[:2] == 0)
    assert np.all(res.model.ramp_up_coef == 0)
