"""Auto-regressive benchmark with exogenous inputs.

``x_t = c + sum_j phi_j x_{t-j} + theta' z_t + e_t`` fitted by least
squares.  Exogenous inputs default to the price, the frame's features and
hour-of-day indicators.  Multi-step forecasts feed predictions back as lags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

DEFAULT_LAGS = 24


class RankDeficientError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("rank-deficient ARX design; collinear columns: " + ", ".join(self.columns))


@dataclass
class ArxModel:
    lags: int
    ar_coef: np.ndarray
    exo_coef: np.ndarray
    intercept: float
    sigma2: float
    exo_names: tuple = ()
    calendar: bool = True
    dropped: tuple = field(default=())

    def __post_init__(self):
        if self.lags < 1:
            raise ValueError("lag order must be >= 1")
        self.ar_coef = np.asarray(self.ar_coef, dtype=float)
        self.exo_coef = np.asarray(self.exo_coef, dtype=float)
        if self.ar_coef.shape != (self.lags,):
            raise ValueError("need one autoregressive coefficient per lag")
        if self.exo_coef.shape != (len(self.exo_names),):
            raise ValueError("exogenous coefficients do not match exogenous names")


def hour_indicators(timestamps):
    """One column per hour 1..23 (hour 0 is the baseline)."""
    hours = (np.asarray(timestamps).astype("datetime64[h]").astype(np.int64) % 24)
    return (hours[:, None] == np.arange(1, 24)[None, :]).astype(float)


def exogenous_matrix(frame, calendar=True, use_price=True):
    """Exogenous design block and its column names."""
    cols, names = [], []
    if use_price:
        cols.append(frame.price[:, None])
        names.append("price")
    cols.append(frame.features)
    names.extend(frame.feature_names)
    if calendar:
        cols.append(hour_indicators(frame.timestamps))
        names.extend(f"hour_{h}" for h in range(1, 24))
    return np.hstack(cols), tuple(names)


def collinear_columns(A, names, rtol=1e-10):
    """Names of columns that QR with column pivoting finds linearly dependent."""
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    _, R, piv = scipy.linalg.qr(A / scale, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * max(d[0] if d.size else 0.0, 1e-300)))
    return [names[j] for j in sorted(piv[rank:])]


def fit_arx(frame, lags=DEFAULT_LAGS, calendar=True, use_price=True, drop_collinear=False):
    """Least-squares ARX fit on ``frame``.

    Rows whose target or any lag is unmeasured (``gap == 0``) are skipped.
    With ``drop_collinear`` dependent exogenous columns get a zero
    coefficient instead of raising :class:`RankDeficientError`.
    """
    if lags < 1:
        raise ValueError("lag order must be >= 1")
    Zx, exo_names = exogenous_matrix(frame, calendar, use_price)
    T = len(frame)
    if T <= lags + Zx.shape[1]:
        raise ValueError(f"need more than {lags + Zx.shape[1]} periods for lag order {lags}, "
                         f"got {T}")
    x = np.where(frame.gap == 1, frame.load, np.nan)
    lagged = np.column_stack([x[lags - j:T - j] for j in range(1, lags + 1)])
    target = x[lags:]
    ok = ~np.isnan(target) & ~np.isnan(lagged).any(axis=1)
    names = ["intercept"] + [f"lag_{j}" for j in range(1, lags + 1)] + list(exo_names)
    A = np.hstack([np.ones((T - lags, 1)), lagged, Zx[lags:]])[ok]
    y = target[ok]
    if A.shape[0] <= A.shape[1]:
        raise ValueError("too few complete rows for the ARX design")

    bad = collinear_columns(A, names)
    keep = np.ones(len(names), dtype=bool)
    if bad:
        if not drop_collinear:
            raise RankDeficientError(bad)
        keep[[names.index(n) for n in bad]] = False
    coef = np.zeros(len(names))
    coef[keep], *_ = np.linalg.lstsq(A[:, keep], y, rcond=None)
    resid = y - A @ coef
    sigma2 = float(resid @ resid / max(1, len(y) - keep.sum()))
    return ArxModel(lags, coef[1:lags + 1], coef[lags + 1:], float(coef[0]), sigma2,
                    exo_names, calendar, tuple(bad))


def predict_arx(model, history, exogenous):
    """Recursive forecast.

    ``history`` holds at least ``model.lags`` past loads (most recent last);
    missing values are carried forward from the previous observation.
    ``exogenous`` is the exogenous block for the forecast steps, one row per
    step, laid out as :func:`exogenous_matrix`.
    """
    n = model.lags
    hist = np.asarray(history, dtype=float)
    if hist.size < n:
        raise ValueError(f"history must cover {n} lags, got {hist.size}")
    hist = _carry_forward(hist[-n:])
    Zx = np.atleast_2d(np.asarray(exogenous, dtype=float))
    out = np.empty(Zx.shape[0])
    buf = list(hist)
    for k in range(Zx.shape[0]):
        lags = np.array(buf[-1:-n - 1:-1])
        out[k] = model.intercept + model.ar_coef @ lags + model.exo_coef @ Zx[k]
        buf.append(out[k])
    return out


def _carry_forward(values):
    v = values.copy()
    if np.all(np.isnan(v)):
        raise ValueError("no observed load in the lag window")
    first = np.flatnonzero(~np.isnan(v))[0]
    v[:first] = v[first]
    for i in range(first + 1, v.size):
        if np.isnan(v[i]):
            v[i] = v[i - 1]
    return v


class ArxForecaster:
    """Fit on a training frame and forecast a later window of the same series."""

    def __init__(self, lags=DEFAULT_LAGS, calendar=True, use_price=True, drop_collinear=True):
        self.lags = lags
        self.calendar = calendar
        self.use_price = use_price
        self.drop_collinear = drop_collinear

    def fit(self, frame):
        self.model_ = fit_arx(frame, self.lags, self.calendar, self.use_price, self.drop_collinear)
        return self

    def forecast(self, history_load, future):
        """Forecast every period of ``future`` (a frame) from ``history_load``."""
        Zx, _ = exogenous_matrix(future, self.calendar, self.use_price)
        return predict_arx(self.model_, history_load, Zx)
