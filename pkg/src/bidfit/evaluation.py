"""Forecast metrics, rolling day-ahead backtests and (L, E) cross-validation.

Every test day is forecast from an issue time of 12:00 on the previous day:
the model is fitted on the trailing training window that ends just before
the issue time, and the 24 hours of the target day (13 to 36 steps ahead)
are predicted with prices and features assumed known.
"""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .arx import ArxForecaster
from .consumer import simulate
from .estimation import EstimationConfig
from .estimator import fit_pipeline, fit_simple_inv

METHODS = ("inv", "simple-inv", "arx")
DEFAULT_L_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0)
DEFAULT_E_GRID = (0.0, 1.0, 2.0, 3.0, 4.0)
HOUR = np.timedelta64(1, "h")
DAY = np.timedelta64(24, "h")


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: float

    def as_dict(self):
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}


def metrics(pred, actual, mask=None):
    """MAE, RMSE and MAPE (as a fraction) over periods with ``mask == 1``.

    MAPE only uses periods with positive actual load.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise ValueError("pred and actual differ in length")
    use = np.ones(pred.size, bool) if mask is None else np.asarray(mask).ravel() == 1
    if use.shape != pred.shape:
        raise ValueError("mask length differs from the series")
    use &= np.isfinite(actual) & np.isfinite(pred)
    if not use.any():
        raise ValueError("every period is masked")
    err = pred[use] - actual[use]
    pos = use & (actual > 0)
    mape = float(np.mean(np.abs(pred[pos] - actual[pos]) / actual[pos])) if pos.any() else np.nan
    return Metrics(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2))), mape)


@dataclass
class ForecastReport:
    """Per-period forecasts and actuals of a backtest."""

    method: str
    timestamps: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray
    gap: np.ndarray
    issue_times: np.ndarray = field(default_factory=lambda: np.zeros(0, "datetime64[s]"))

    @property
    def metrics(self):
        return metrics(self.predicted, self.actual, self.gap)

    @property
    def mae(self):
        return self.metrics.mae

    @property
    def rmse(self):
        return self.metrics.rmse

    @property
    def mape(self):
        return self.metrics.mape

    @property
    def days(self):
        return self.timestamps.astype("datetime64[D]")

    def per_day(self):
        """One row per day; days without a measured period have NaN metrics."""
        rows = []
        for day in np.unique(self.days):
            sel = self.days == day
            try:
                m = metrics(self.predicted[sel], self.actual[sel], self.gap[sel]).as_dict()
            except ValueError:
                m = {"mae": np.nan, "rmse": np.nan, "mape": np.nan}
            rows.append({"day": str(day), "n": int(sel.sum()), **m})
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "predicted", "actual", "gap"])
            for t, p, a, g in zip(self.timestamps, self.predicted, self.actual, self.gap):
                w.writerow([str(t), repr(float(p)), "" if np.isnan(a) else repr(float(a)), int(g)])

    def days_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["day", "n", "mae", "rmse", "mape"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.per_day())


def select_test_days(frame, n_days):
    """The last ``n_days`` complete calendar days of ``frame``."""
    days = np.unique(frame.timestamps.astype("datetime64[D]"))
    complete = [d for d in days if np.sum(frame.timestamps.astype("datetime64[D]") == d) == 24]
    if len(complete) < n_days:
        raise InsufficientHistoryError(f"frame has {len(complete)} complete days, need {n_days}")
    return np.array(complete[-n_days:])


def rolling_forecast(frame, config, method="inv", n_test_days=14, days=None, train_days=90,
                     issue_hour=12, arx_options=None, simple_window=168, on_fit=None):
    """Day-ahead backtest of one method over the last ``n_test_days`` days.

    ``days`` overrides the test days (``datetime64[D]`` values).  ``on_fit``
    is called as ``on_fit(issue_time, training_frame)`` before each fit, which
    lets callers audit that no data after the issue time is used.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if frame.step != HOUR:
        raise ValueError("rolling forecasts need hourly data")
    days = select_test_days(frame, n_test_days) if days is None else np.asarray(days, "datetime64[D]")
    ts = frame.timestamps
    stamps, pred, actual, gap, issues = [], [], [], [], []
    for day in days:
        start = day.astype("datetime64[s]")
        issue = start - DAY + issue_hour * HOUR
        lo = np.searchsorted(ts, issue - train_days * DAY)
        hi = np.searchsorted(ts, issue)
        if ts[0] > issue - train_days * DAY:
            raise InsufficientHistoryError(
                f"forecast issued {issue} needs {train_days} days of history before it")
        t0, t1 = np.searchsorted(ts, start), np.searchsorted(ts, start + DAY)
        if t1 - t0 != 24:
            raise InsufficientHistoryError(f"day {day} is not fully covered by the data")
        train = frame.slice(lo, hi)
        target = frame.slice(t0, t1).without_load()
        if on_fit is not None:
            on_fit(issue, train)
        pred.append(_forecast_day(method, train, target, frame, hi, t0, config,
                                  arx_options or {}, simple_window))
        stamps.append(ts[t0:t1])
        actual.append(frame.load[t0:t1])
        gap.append(frame.gap[t0:t1])
        issues.append(issue)
    return ForecastReport(method, np.concatenate(stamps), np.concatenate(pred),
                          np.concatenate(actual), np.concatenate(gap).astype(int),
                          np.array(issues, dtype="datetime64[s]"))


def _forecast_day(method, train, target, frame, issue_pos, t0, config, arx_options, window):
    if method == "arx":
        fc = ArxForecaster(**arx_options).fit(train)
        # steps from the issue time up to the end of the target day; keep the last 24
        future = frame.slice(issue_pos, t0 + 24).without_load()
        return fc.forecast(np.where(train.gap == 1, train.load, np.nan), future)[-24:]
    if method == "inv":
        model = fit_pipeline(train, config).model
    else:
        model = fit_simple_inv(train, config, window=window).model
    return simulate(model, target.price, target.features, repair=True).total


def _cv_cell(args):
    frame, config, method, L, E, n_days, train_days = args
    cfg = replace(config, penalty=float(L), forgetting=float(E))
    return rolling_forecast(frame, cfg, method, n_test_days=n_days, train_days=train_days).mape


@dataclass
class CrossValidation:
    penalties: np.ndarray
    forgetting: np.ndarray
    surface: np.ndarray  # MAPE, shape (len(penalties), len(forgetting))
    best_penalty: float
    best_forgetting: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["L", "E", "mape"])
            for i, j in itertools.product(range(len(self.penalties)), range(len(self.forgetting))):
                w.writerow([repr(float(self.penalties[i])), repr(float(self.forgetting[j])),
                            repr(float(self.surface[i, j]))])


def select_best(penalties, forgetting, surface, rtol=1e-12):
    """Grid cell with the lowest MAPE; ties go to larger L, then smaller E."""
    best = np.nanmin(surface)
    tied = np.argwhere(surface <= best + rtol * max(1.0, abs(best)))
    i, j = max(tied, key=lambda ij: (penalties[ij[0]], -forgetting[ij[1]]))
    return float(penalties[i]), float(forgetting[j])


def cross_validate(frame, config=None, penalties=DEFAULT_L_GRID, forgetting=DEFAULT_E_GRID,
                   method="inv", validation_days=14, train_days=90, n_jobs=1):
    """Rolling-horizon MAPE for every (L, E) cell over the trailing validation days."""
    config = config or EstimationConfig()
    penalties = np.asarray(penalties, dtype=float)
    forgetting = np.asarray(forgetting, dtype=float)
    if penalties.size == 0 or forgetting.size == 0:
        raise ValueError("empty cross-validation grid")
    cells = [(frame, config, method, L, E, validation_days, train_days)
             for L, E in itertools.product(penalties, forgetting)]
    if n_jobs == 1:
        values = [_cv_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            values = list(pool.map(_cv_cell, cells))
    surface = np.array(values).reshape(penalties.size, forgetting.size)
    L, E = select_best(penalties, forgetting, surface)
    return CrossValidation(penalties, forgetting, surface, L, E)


def benchmark(frame, config, methods=("inv", "arx", "simple-inv"), n_test_days=14,
              train_days=90, arx_options=None, simple_window=168):
    """Rolling backtests of several methods on the same test days."""
    days = select_test_days(frame, n_test_days)
    return {m: rolling_forecast(frame, config, m, days=days, train_days=train_days,
                                arx_options=arx_options, simple_window=simple_window)
            for m in methods}


def resimulated_error(model, frame, weights):
    """Weighted absolute error of the consumer's response to the frame's prices."""
    total = simulate(model, frame.price, frame.features).total
    meas = np.where(frame.gap == 1, np.nan_to_num(frame.load), total)
    return float(np.sum(np.asarray(weights) * np.abs(total - meas)))
