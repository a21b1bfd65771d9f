"""Two-step estimation pipeline and scikit-learn style wrappers.

``fit_pipeline`` runs the penalty LP and then the utility refinement.
``fit_simple_inv`` is the reduced benchmark: bounds and ramps are read off
the last week of measurements and only the utility curve is estimated.
The estimator classes expose both through ``fit`` / ``predict`` with the
feature matrix as ``X`` and prices passed alongside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .consumer import BidModel, materialize_bid, simulate
from .data import MarketData, compute_weights
from .estimation import EstimationConfig, estimate_step1
from .lp import DEFAULT_TOL
from .refinement import refine as refine_step


@dataclass
class PipelineResult:
    model: BidModel
    step1: object = None
    refinement: object = None


def fit_pipeline(frame, config, refine=True, weights=None, ranges=None):
    """Step 1 (penalty LP) followed, unless ``refine`` is False, by the utility refinement."""
    weights = compute_weights(frame, config.forgetting) if weights is None else np.asarray(weights)
    step1 = estimate_step1(frame, config, weights, ranges)
    if not refine:
        return PipelineResult(step1.model, step1)
    ref = refine_step(frame, weights, step1)
    return PipelineResult(ref.model, step1, ref)


def simple_inv_constraints(frame, n_blocks, window=168):
    """Constant bounds and ramps from the last ``window`` periods.

    ``pmin``/``pmax`` are the smallest and largest measured loads, ramp limits
    the largest measured increase and decrease between consecutive periods.
    Utilities are placeholders to be replaced by the refinement.
    """
    recent = frame.slice(max(0, len(frame) - window), len(frame))
    load = np.where(recent.gap == 1, recent.load, np.nan)
    if np.all(np.isnan(load)):
        raise ValueError("no measured load in the simple-inv window")
    step = np.diff(load)
    step = step[~np.isnan(step)]
    up = float(step.max()) if step.size else 0.0
    down = float(-step.min()) if step.size else 0.0
    I = frame.n_features
    zeros = np.zeros(I)
    return BidModel(np.zeros(n_blocks), up, down, float(np.nanmin(load)), float(np.nanmax(load)),
                    zeros, zeros, zeros, zeros, zeros, frame.feature_names)


def fit_simple_inv(frame, config, weights=None, window=168):
    """Benchmark bid: week-based constant bounds/ramps plus refined utilities."""
    weights = compute_weights(frame, config.forgetting) if weights is None else np.asarray(weights)
    base = simple_inv_constraints(frame, config.n_blocks, window)
    ref = refine_step(frame, weights, constraint_model=base, config=config)
    return PipelineResult(ref.model, None, ref)


def _frame_from_arrays(X, y, price, gap=None, timestamps=None, feature_names=None):
    X = check_array(X, ensure_min_features=0, ensure_min_samples=2)
    y = np.asarray(y, dtype=float).ravel()
    price = np.asarray(price, dtype=float).ravel()
    check_consistent_length(X, y, price)
    if gap is None:
        gap = np.where(np.isnan(y), 0, 1)
    if timestamps is None:
        timestamps = np.datetime64("2000-01-01T00:00:00") + np.arange(len(y)) * np.timedelta64(1, "h")
    names = tuple(feature_names) if feature_names is not None else ()
    return MarketData(timestamps, price, y, X, gap, names)


class _BidEstimatorBase(BaseEstimator):
    def _config(self):
        return EstimationConfig(
            n_blocks=self.n_blocks, penalty=getattr(self, "penalty", 0.0),
            forgetting=self.forgetting, features=dict(self.features or {}), tol=self.tol,
            weight_up=getattr(self, "weight_up", 1.0), weight_down=getattr(self, "weight_down", 1.0),
            margin=getattr(self, "margin", 0.1), standardize=self.standardize)

    def fit(self, X, y, price, gap=None, timestamps=None, feature_names=None):
        """Fit on features ``X`` (T, I), loads ``y`` and prices ``price``."""
        return self.fit_frame(_frame_from_arrays(X, y, price, gap, timestamps, feature_names))

    def fit_frame(self, frame):
        result = self._fit(frame, self._config())
        self.result_ = result
        self.bid_model_ = result.model
        self.n_features_in_ = frame.n_features
        self.feature_names_ = frame.feature_names
        return self

    def _features(self, X):
        check_is_fitted(self, "bid_model_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with "
                             f"{self.n_features_in_}")
        return X

    def market_bid(self, X):
        """Per-period bids for the feature rows ``X``."""
        return materialize_bid(self.bid_model_, self._features(X))

    def simulate(self, X, price, deterministic=False):
        """Consumer response to ``price`` over one horizon (no ramp link before it)."""
        X = self._features(X)
        price = np.asarray(price, dtype=float).ravel()
        check_consistent_length(X, price)
        return simulate(self.bid_model_, price, X, deterministic=deterministic)

    def predict(self, X, price):
        """Total consumption forecast for the horizon described by ``X`` and ``price``."""
        return self.simulate(X, price).total


class InverseBidEstimator(_BidEstimatorBase):
    """Market bid estimated by the penalty LP plus utility refinement.

    Parameters mirror :class:`EstimationConfig`; ``refine=False`` stops after
    the first step.
    """

    def __init__(self, n_blocks=12, penalty=0.1, forgetting=1.0, refine=True, margin=0.1,
                 weight_up=1.0, weight_down=1.0, features=None, standardize=True,
                 tol=DEFAULT_TOL):
        self.n_blocks = n_blocks
        self.penalty = penalty
        self.forgetting = forgetting
        self.refine = refine
        self.margin = margin
        self.weight_up = weight_up
        self.weight_down = weight_down
        self.features = features
        self.standardize = standardize
        self.tol = tol

    def _fit(self, frame, config):
        return fit_pipeline(frame, config, refine=self.refine)

    @property
    def step1_(self):
        check_is_fitted(self, "bid_model_")
        return self.result_.step1


class SimpleInvEstimator(_BidEstimatorBase):
    """Benchmark with week-based constant bounds and ramps and refined utilities."""

    def __init__(self, n_blocks=12, forgetting=1.0, window=168, features=None,
                 standardize=True, tol=DEFAULT_TOL):
        self.n_blocks = n_blocks
        self.forgetting = forgetting
        self.window = window
        self.features = features
        self.standardize = standardize
        self.tol = tol

    def _fit(self, frame, config):
        return fit_simple_inv(frame, config, window=self.window)
