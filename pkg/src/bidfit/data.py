"""Aligned price / load / feature time series, weights and synthetic data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .consumer import BidModel, materialize_bid, simulate

CORE_COLUMNS = ("timestamp", "price", "load", "gap")
_TS_FORMAT = "%Y-%m-%dT%H:%M:%S"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class MarketData:
    """Hourly price, measured load, features and measurement flags.

    ``load`` holds NaN where the measurement is missing; such periods always
    carry ``gap == 0``.
    """

    timestamps: np.ndarray
    price: np.ndarray
    load: np.ndarray
    features: np.ndarray
    gap: np.ndarray
    feature_names: tuple = ()

    def __post_init__(self):
        ts = np.asarray(self.timestamps).astype("datetime64[s]")
        price = np.array(self.price, dtype=float).ravel()
        load = np.array(self.load, dtype=float).ravel()
        T = price.size
        Z = np.array(self.features, dtype=float)
        if Z.size == 0:
            Z = np.zeros((T, 0))
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        gap = np.asarray(self.gap).ravel()
        names = tuple(self.feature_names) or tuple(f"z{i}" for i in range(Z.shape[1]))
        if T == 0:
            raise DataError("empty dataset")
        if not (ts.size == load.size == gap.size == Z.shape[0] == T):
            raise DataError("columns have different lengths")
        if len(names) != Z.shape[1]:
            raise DataError("feature_names does not match the feature matrix")
        if not np.all(np.isin(gap, (0, 1))):
            raise DataError("gap flags must be 0 or 1")
        gap = np.where(np.isnan(load), 0, gap).astype(int)
        if np.any(load[gap == 1] < 0):
            raise DataError("negative load in a measured period")
        if not np.all(np.isfinite(price)):
            raise DataError("price must be finite")
        if not np.all(np.isfinite(Z)):
            raise DataError("features must be finite")
        if T >= 2:
            step = np.diff(ts)
            if np.any(step <= np.timedelta64(0, "s")) or np.any(step != step[0]):
                raise DataError("non-uniform time step")
        for name, value in (("timestamps", ts), ("price", price), ("load", load),
                            ("features", Z), ("gap", gap), ("feature_names", names)):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self):
        return self.price.size

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def step(self):
        return self.timestamps[1] - self.timestamps[0] if len(self) > 1 else np.timedelta64(1, "h")

    def slice(self, start, stop):
        return MarketData(self.timestamps[start:stop], self.price[start:stop],
                          self.load[start:stop], self.features[start:stop],
                          self.gap[start:stop], self.feature_names)

    def without_load(self):
        """Copy with every load hidden (for forward-looking inputs)."""
        return replace(self, load=np.full(len(self), np.nan), gap=np.zeros(len(self), int))

    def indicator_mask(self):
        return indicator_columns(self.features)

    def index_of(self, timestamp):
        return int(np.searchsorted(self.timestamps, np.datetime64(timestamp, "s")))


def indicator_columns(features):
    Z = np.asarray(features, dtype=float)
    if Z.size == 0:
        return np.zeros(Z.shape[1] if Z.ndim == 2 else 0, dtype=bool)
    return np.all((Z == 0.0) | (Z == 1.0), axis=0)


def _parse_float(text, what, row):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}: cannot parse {what} value {text!r}") from None


def load_dataset(path, schema=None, require_load=True):
    """Read a delimited file with columns ``timestamp, price, load, gap, <features>``.

    ``schema`` maps canonical names (``timestamp``, ``price``, ``load``,
    ``gap``) to the file's column names, and may list ``features`` explicitly;
    by default every non-core column is a feature.  An empty load cell forces
    ``gap = 0``; a missing gap column means every measured load is valid.
    """
    schema = dict(schema or {})
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",;\t")
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty dataset") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError("empty dataset")
    col = {name: schema.get(name, name) for name in CORE_COLUMNS}
    for name in ("timestamp", "price", "load") if require_load else ("timestamp", "price"):
        if col[name] not in header:
            raise DataError(f"missing column {col[name]!r}")
    has_gap = col["gap"] in header
    used = {c for c in col.values() if c in header}
    feature_cols = list(schema.get("features") or [h for h in header if h not in used])
    for f in feature_cols:
        if f not in header:
            raise DataError(f"missing column {f!r}")
    pos = {h: i for i, h in enumerate(header)}
    T = len(rows)
    price = np.empty(T)
    load = np.empty(T)
    gap = np.ones(T, dtype=int)
    Z = np.empty((T, len(feature_cols)))
    stamps = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {r + 2}: expected {len(header)} fields, got {len(row)}")
        stamps.append(row[pos[col["timestamp"]]].strip())
        price[r] = _parse_float(row[pos[col["price"]]], "price", r + 2)
        cell = row[pos[col["load"]]].strip() if col["load"] in pos else ""
        load[r] = np.nan if cell == "" else _parse_float(cell, "load", r + 2)
        if has_gap:
            g = row[pos[col["gap"]]].strip()
            gap[r] = 1 if g == "" else int(_parse_float(g, "gap", r + 2))
        for j, f in enumerate(feature_cols):
            Z[r, j] = _parse_float(row[pos[f]], f, r + 2)
    try:
        ts = pd.to_datetime(stamps, format="ISO8601").to_numpy().astype("datetime64[s]")
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable timestamp: {exc}") from None
    return MarketData(ts, price, load, Z, gap, tuple(feature_cols))


def save_dataset(frame, path):
    """Write ``frame`` in the canonical delimited format (exact float repr)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CORE_COLUMNS) + list(frame.feature_names))
        stamps = pd.DatetimeIndex(frame.timestamps).strftime(_TS_FORMAT)
        for t in range(len(frame)):
            load = "" if np.isnan(frame.load[t]) else repr(float(frame.load[t]))
            w.writerow([stamps[t], repr(float(frame.price[t])), load, str(int(frame.gap[t]))]
                       + [repr(float(v)) for v in frame.features[t]])


def compute_weights(frame, E):
    """Observation weights ``gap_t * (t / T) ** E`` with 1-based ``t``."""
    gap = frame.gap if isinstance(frame, MarketData) else np.asarray(frame)
    if E < 0:
        raise ValueError("forgetting factor must be nonnegative")
    T = gap.size
    t = np.arange(1, T + 1, dtype=float)
    return gap.astype(float) * (t / T) ** float(E)


@dataclass(frozen=True)
class FeatureRanges:
    lower: np.ndarray
    upper: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in length")
        if np.any(lo > hi):
            raise ValueError("feature range with lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __len__(self):
        return self.lower.size

    def contains(self, features):
        Z = np.atleast_2d(np.asarray(features, dtype=float))
        return bool(np.all((Z >= self.lower) & (Z <= self.upper)))

    def sample(self, n, rng=None):
        rng = np.random.default_rng(rng)
        return rng.uniform(self.lower, self.upper, size=(n, len(self)))

    def corners(self):
        """Every vertex of the box (only sensible for a handful of features)."""
        grid = np.array(np.meshgrid(*zip(self.lower, self.upper), indexing="ij"))
        return grid.reshape(len(self), -1).T

    def transform(self, shift, scale):
        """Ranges of ``(Z - shift) / scale`` for positive ``scale``."""
        return FeatureRanges((self.lower - shift) / scale, (self.upper - shift) / scale, self.names)


def feature_ranges(frame, margin=0.1):
    """Observed min/max widened by ``margin`` times the span; indicators stay in [0, 1]."""
    Z = frame.features if isinstance(frame, MarketData) else np.atleast_2d(frame)
    names = frame.feature_names if isinstance(frame, MarketData) else ()
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    span = hi - lo
    lo, hi = lo - margin * span, hi + margin * span
    ind = indicator_columns(Z)
    lo[ind], hi[ind] = 0.0, 1.0
    return FeatureRanges(lo, hi, names)


def generate_synthetic(truth, prices, features, noise_sd=0.0, timestamps=None,
                       horizon=None, rng=None, feature_names=None):
    """Loads produced by the consumer LP under ``truth`` plus Gaussian noise.

    ``horizon`` splits the series into independent consumer problems of that
    many periods (e.g. 24 for day-by-day clearing); ``None`` solves one LP
    over the whole series.  Ties are resolved deterministically.
    """
    prices = np.asarray(prices, dtype=float)
    Z = np.asarray(features, dtype=float).reshape(len(prices), -1)
    bid = materialize_bid(truth, Z)  # raises InfeasibleBidError naming the period
    T = len(prices)
    step = horizon or T
    load = np.empty(T)
    for start in range(0, T, step):
        stop = min(start + step, T)
        sol = simulate(bid.slice(start, stop), prices[start:stop], deterministic=True)
        load[start:stop] = sol.total
    if noise_sd > 0:
        load = load + np.random.default_rng(rng).normal(0.0, noise_sd, T)
    load = np.maximum(load, 0.0)
    if timestamps is None:
        timestamps = np.datetime64("2006-06-01T00:00:00") + np.arange(T) * np.timedelta64(1, "h")
    names = feature_names or truth.feature_names or tuple(f"z{i}" for i in range(Z.shape[1]))
    return MarketData(timestamps, prices, load, Z, np.ones(T, int), tuple(names))


def save_synthetic(frame, truth, path):
    """Write the dataset plus a ``<stem>.truth.json`` sidecar with the true model."""
    path = Path(path)
    save_dataset(frame, path)
    sidecar = path.with_name(path.stem + ".truth.json")
    truth.save(sidecar)
    return sidecar


def demo_inputs(n_days, seed=0, start="2006-09-01"):
    """Synthetic hourly prices and weather-like features for ``n_days`` days.

    Features: outdoor temperature (deg C), solar irradiance (W/m2) and a 0/1
    indicator of the morning and evening peak hours.
    """
    rng = np.random.default_rng(seed)
    T = 24 * n_days
    t = np.arange(T)
    hour = t % 24
    day = t // 24
    daily_mean = 8.0 + np.cumsum(rng.normal(0.0, 0.8, n_days))
    daily_mean = 8.0 + (daily_mean - daily_mean.mean()) * 0.7
    temperature = (daily_mean[day] + 5.0 * np.sin(2 * np.pi * (hour - 9) / 24)
                   + rng.normal(0.0, 0.6, T))
    cloud = np.clip(rng.beta(2.0, 2.0, n_days), 0.1, 1.0)
    solar = 750.0 * np.clip(np.sin(np.pi * (hour - 6) / 12), 0.0, None) * cloud[day]
    peak = np.isin(hour, (7, 8, 9, 17, 18, 19, 20)).astype(float)
    shape = 0.09 + 0.04 * np.sin(2 * np.pi * (hour - 14) / 24) + 0.02 * peak
    noise = np.zeros(T)
    for k in range(1, T):
        noise[k] = 0.7 * noise[k - 1] + rng.normal(0.0, 0.025)
    spikes = rng.random(T) < 0.02
    price = np.clip(shape + noise + spikes * rng.uniform(0.04, 0.1, T), 0.005, None)
    timestamps = np.datetime64(start + "T00:00:00") + t * np.timedelta64(1, "h")
    features = np.column_stack([temperature, solar, peak])
    return timestamps, price, features, ("temperature", "solar", "peak")


def demo_truth(n_blocks=4):
    """A price-responsive pool whose bounds and utilities depend on the demo features."""
    base = np.linspace(0.16, 0.05, n_blocks)
    return BidModel(
        utility=base,
        utility_coef=[-0.002, 0.0, 0.02],
        ramp_up=22.0, ramp_up_coef=[0.3, 0.0, 6.0],
        ramp_down=24.0, ramp_down_coef=[0.0, 0.0, 8.0],
        pmin=40.0, pmin_coef=[-1.0, -0.005, 10.0],
        pmax=115.0, pmax_coef=[-2.4, -0.025, 18.0],
        feature_names=("temperature", "solar", "peak"),
    )


def demo_dataset(n_days, seed=0, n_blocks=4, noise_frac=0.02, truth=None):
    """Synthetic dataset generated day by day from :func:`demo_truth`.

    Noise standard deviation is ``noise_frac`` times the mean noise-free load.
    """
    timestamps, price, features, names = demo_inputs(n_days, seed)
    truth = truth or demo_truth(n_blocks)
    clean = generate_synthetic(truth, price, features, 0.0, timestamps, horizon=24,
                               feature_names=names)
    sd = noise_frac * float(np.mean(clean.load))
    rng = np.random.default_rng(seed + 1)
    load = np.maximum(clean.load + rng.normal(0.0, sd, len(clean)), 0.0)
    return replace(clean, load=load), truth
