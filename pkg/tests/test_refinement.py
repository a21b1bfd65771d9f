import numpy as np
import pytest

from bidfit.consumer import BidModel, MarketBid, materialize_bid, simulate, welfare
from bidfit.data import compute_weights, demo_dataset
from bidfit.estimation import EstimationConfig, estimate_step1
from bidfit.estimator import fit_pipeline
from bidfit.evaluation import metrics
from bidfit.refinement import ABOVE, BELOW, INSIDE, block_decompose, period_gaps, refine
from conftest import make_frame


def one_period_bid(pmin=2.0, pmax=6.0, B=4):
    return MarketBid(np.zeros((1, B)), np.zeros(1), np.zeros(1), np.array([pmin]),
                     np.array([pmax]))


@pytest.mark.parametrize("load, blocks, clip", [
    (4.5, [1.0, 1.0, 0.5, 0.0], INSIDE),
    (7.0, [1.0, 1.0, 1.0, 1.0], ABOVE),
    (1.0, [0.0, 0.0, 0.0, 0.0], BELOW),
])
def test_block_decomposition(load, blocks, clip):
    dec = block_decompose([load], one_period_bid())
    np.testing.assert_allclose(dec.blocks[0], blocks)
    assert dec.clip[0] == clip


def test_missing_load_gets_empty_blocks():
    dec = block_decompose([np.nan], one_period_bid())
    assert dec.missing[0] and np.all(dec.blocks == 0)


def test_single_period_single_block():
    frame = make_frame([3.0], [2.0])
    base = BidModel([0.0], 0.0, 0.0, 0.0, 2.0)
    res = refine(frame, np.ones(1), constraint_model=base,
                 config=EstimationConfig(n_blocks=1, forgetting=0))
    assert res.model.utility[0] >= 3.0 - 1e-9
    assert res.objective <= 1e-9
    np.testing.assert_allclose(res.decomposition.blocks, [[1.0]])  # normalised by the median load


@pytest.fixture(scope="module")
def noisy_fit():
    frame, truth = demo_dataset(14, seed=8)
    cfg = EstimationConfig(n_blocks=4, penalty=0.1)
    step1 = estimate_step1(frame, cfg)
    weights = compute_weights(frame, cfg.forgetting)
    return frame, step1, weights, refine(frame, weights, step1)


def test_gap_matches_dual_minus_primal(noisy_fit):
    _, _, weights, res = noisy_fit
    bid, p = res.bid, res.prices
    x = res.decomposition.blocks
    recomputed = period_gaps(p, bid, res.decomposition, res.lambda_up, res.lambda_down,
                             res.psi_upper, res.psi_lower)
    np.testing.assert_allclose(res.gaps, recomputed, atol=1e-8)
    # the per-period split adds up to the horizon's dual minus primal objective
    dmin = np.diff(bid.pmin)
    dual = (np.sum(bid.block_size[:, None] * res.psi_upper)
            + res.lambda_up @ (bid.ramp_up[1:] - dmin)
            + res.lambda_down @ (bid.ramp_down[1:] + dmin))
    primal = welfare(bid, p, x)
    assert res.gaps.sum() == pytest.approx(dual - primal, abs=1e-7 * (1 + abs(primal)))


def test_gaps_nonnegative(noisy_fit):
    assert np.all(noisy_fit[3].gaps >= -1e-12)


def test_constraint_parameters_untouched(noisy_fit):
    _, step1, _, res = noisy_fit
    for name in ("ramp_up", "ramp_down", "pmin", "pmax", "ramp_up_coef", "ramp_down_coef",
                 "pmin_coef", "pmax_coef"):
        np.testing.assert_array_equal(getattr(res.model, name), getattr(step1.model, name))


def test_monotone_refined_utilities(noisy_fit):
    assert np.all(np.diff(noisy_fit[3].model.utility) <= 1e-12)


def test_zero_gap_means_measured_load_is_optimal():
    frame, truth = demo_dataset(5, seed=9, noise_frac=0.0)
    cfg = EstimationConfig(n_blocks=4, forgetting=0)
    res = refine(frame, None, constraint_model=truth, config=cfg)
    assert res.objective <= 1e-6
    for d in range(5):
        s = slice(24 * d, 24 * d + 24)
        bid = materialize_bid(res.model, frame.features[s])
        x = block_decompose(frame.load[s], bid).blocks
        optimum = simulate(bid, frame.price[s]).objective
        assert welfare(bid, frame.price[s], x) == pytest.approx(optimum, abs=1e-6)


def test_refinement_exactness_small():
    frame, truth = demo_dataset(10, seed=10, noise_frac=0.0)
    res = refine(frame, None, constraint_model=truth,
                 config=EstimationConfig(n_blocks=4, forgetting=0))
    assert res.objective <= 1e-6
    sims = np.concatenate([simulate(res.model, frame.price[s], frame.features[s]).total
                           for s in (slice(24 * d, 24 * d + 24) for d in range(10))])
    assert np.mean(np.abs(sims - frame.load)) <= 1e-6 * np.mean(frame.load)


def test_without_tie_break_gap_is_same(noisy_fit):
    frame, step1, weights, res = noisy_fit
    plain = refine(frame, weights, step1, tie_break=False)
    assert res.objective == pytest.approx(plain.objective, rel=1e-6, abs=1e-8)


def test_refine_requires_a_constraint_source():
    frame = make_frame([0.1, 0.2], [1.0, 2.0])
    with pytest.raises(ValueError):
        refine(frame, None)


def test_refined_model_forecasts_better_than_step1():
    frame, _ = demo_dataset(31, seed=5)
    train, test = frame.slice(0, 28 * 24), frame.slice(28 * 24, 31 * 24)
    fit = fit_pipeline(train, EstimationConfig(n_blocks=4, penalty=0.1))

    def mape(model):
        pred = np.concatenate([simulate(model, test.price[s], test.features[s]).total
                               for s in (slice(0, 24), slice(24, 48), slice(48, 72))])
        return metrics(pred, test.load).mape

    assert mape(fit.model) <= mape(fit.step1.model)
