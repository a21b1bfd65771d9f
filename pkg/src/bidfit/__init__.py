"""Estimate price-responsive market bids from price and consumption data.

The bid is a block-wise marginal utility curve with ramp limits and
consumption bounds, all affine in exogenous features.  Estimation inverts
the pool's welfare-maximisation LP: a penalty LP fits every parameter, then
a duality-gap LP re-fits the utility curve.
"""

__version__ = "0.1.0"

from .arx import ArxForecaster, ArxModel, RankDeficientError, fit_arx, predict_arx
from .consumer import (BidModel, ConsumptionSolution, InfeasibleBidError, MarketBid,
                       build_consumer_lp, kkt_residuals, materialize_bid, simulate)
from .data import (DataError, FeatureRanges, MarketData, compute_weights, feature_ranges,
                   generate_synthetic, load_dataset, save_dataset)
from .estimation import EstimationConfig, EstimationResult, build_penalty_lp, estimate_step1
from .estimator import (InverseBidEstimator, SimpleInvEstimator, fit_pipeline,
                        fit_simple_inv)
from .evaluation import (ForecastReport, cross_validate, metrics, rolling_forecast)
from .exact import BudgetExceededError, solve_exact
from .lp import LpError, LpProblem, LpSolution, check_kkt, solve
from .refinement import block_decompose, refine, refine_utility
from .robust import emit_robust_rows

__all__ = [
    "ArxForecaster", "ArxModel", "BidModel", "BudgetExceededError", "ConsumptionSolution",
    "DataError", "EstimationConfig", "EstimationResult", "FeatureRanges", "ForecastReport",
    "InfeasibleBidError", "InverseBidEstimator", "LpError", "LpProblem", "LpSolution",
    "MarketBid", "MarketData", "RankDeficientError", "SimpleInvEstimator", "block_decompose",
    "build_consumer_lp", "build_penalty_lp", "check_kkt", "compute_weights", "cross_validate",
    "emit_robust_rows", "estimate_step1", "feature_ranges", "fit_arx", "fit_pipeline",
    "fit_simple_inv", "generate_synthetic", "kkt_residuals", "load_dataset", "materialize_bid",
    "metrics", "predict_arx", "refine", "refine_utility", "rolling_forecast", "save_dataset",
    "simulate", "solve", "solve_exact",
]
