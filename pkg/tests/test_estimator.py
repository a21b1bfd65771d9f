import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bidfit.consumer import simulate
from bidfit.data import demo_dataset
from bidfit.estimation import EstimationConfig
from bidfit.estimator import (InverseBidEstimator, SimpleInvEstimator, fit_pipeline,
                              fit_simple_inv, simple_inv_constraints)


@pytest.fixture(scope="module")
def week():
    frame, _ = demo_dataset(7, seed=3)
    return frame


def test_params_round_trip():
    est = InverseBidEstimator(n_blocks=3, penalty=0.2)
    params = est.get_params()
    assert params["n_blocks"] == 3 and params["penalty"] == 0.2
    est.set_params(forgetting=2.0, refine=False)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_not_fitted():
    with pytest.raises(NotFittedError):
        InverseBidEstimator().predict(np.zeros((3, 2)), np.zeros(3))


def test_fit_predict_matches_pipeline(week):
    est = InverseBidEstimator(n_blocks=2, penalty=0.1).fit(
        week.features, week.load, week.price, timestamps=week.timestamps,
        feature_names=week.feature_names)
    ref = fit_pipeline(week, EstimationConfig(n_blocks=2, penalty=0.1)).model
    np.testing.assert_allclose(est.bid_model_.utility, ref.utility, atol=1e-9)
    day = slice(0, 24)
    np.testing.assert_allclose(est.predict(week.features[day], week.price[day]),
                               simulate(ref, week.price[day], week.features[day]).total,
                               atol=1e-6)
    assert est.step1_ is not None and est.feature_names_ == week.feature_names
    assert est.market_bid(week.features[day]).utility.shape == (24, 2)


def test_feature_count_mismatch(week):
    est = InverseBidEstimator(n_blocks=1, refine=False).fit_frame(week)
    with pytest.raises(ValueError, match="features"):
        est.predict(np.zeros((24, week.n_features + 1)), np.zeros(24))
    with pytest.raises(ValueError):
        est.predict(week.features[:24], np.zeros(23))


def test_simple_inv_constraints_from_last_week(week):
    base = simple_inv_constraints(week, 3, window=48)
    recent = week.load[-48:]
    assert base.pmin == recent.min() and base.pmax == recent.max()
    assert base.ramp_up == pytest.approx(np.diff(recent).max())
    assert base.ramp_down == pytest.approx(-np.diff(recent).min())
    assert np.all(base.pmin_coef == 0) and np.all(base.ramp_up_coef == 0)


def test_simple_inv_estimator(week):
    est = SimpleInvEstimator(n_blocks=2, window=72).fit_frame(week)
    ref = fit_simple_inv(week, EstimationConfig(n_blocks=2), window=72).model
    np.testing.assert_array_equal(est.bid_model_.utility, ref.utility)
    pred = est.predict(week.features[-24:], week.price[-24:])
    assert np.all(pred >= ref.pmin - 1e-9) and np.all(pred <= ref.pmax + 1e-9)
