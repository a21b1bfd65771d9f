"""Price response of a pool of consumers described by a complex market bid.

A :class:`BidModel` holds intercepts and feature coefficients; materialising
it against a feature matrix gives a :class:`MarketBid` with one set of block
utilities, ramp limits and consumption bounds per period.  The pool's
consumption is the solution of a welfare-maximising LP over the horizon.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .lp import DEFAULT_TOL, LpProblem, solve

_COEF_FIELDS = ("utility_coef", "ramp_up_coef", "ramp_down_coef", "pmin_coef", "pmax_coef")


class InfeasibleBidError(ValueError):
    """A materialised bid violates 0 <= pmin <= pmax or ramp_up >= -ramp_down."""

    def __init__(self, message, period=None, invariant=None):
        super().__init__(message)
        self.period = period
        self.invariant = invariant


class RepairWarning(UserWarning):
    """Ramp limits were widened to make a forecast horizon feasible."""


@dataclass(frozen=True)
class BidModel:
    """Affine map from features to bid parameters.

    ``utility`` holds the block intercepts (non-increasing).  The utility
    coefficients are shared by all blocks, so features shift the whole
    marginal-utility curve.
    """

    utility: np.ndarray
    ramp_up: float
    ramp_down: float
    pmin: float
    pmax: float
    utility_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ramp_up_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ramp_down_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pmin_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pmax_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feature_names: tuple = ()

    def __post_init__(self):
        utility = np.atleast_1d(np.asarray(self.utility, dtype=float)).copy()
        if utility.ndim != 1 or utility.size < 1:
            raise ValueError("utility intercepts must be a non-empty vector")
        object.__setattr__(self, "utility", utility)
        for name in ("ramp_up", "ramp_down", "pmin", "pmax"):
            object.__setattr__(self, name, float(getattr(self, name)))
        n = max(np.size(getattr(self, f)) for f in _COEF_FIELDS)
        n = max(n, len(self.feature_names))
        for f in _COEF_FIELDS:
            v = np.asarray(getattr(self, f), dtype=float).ravel()
            if v.size == 0:
                v = np.zeros(n)
            if v.size != n:
                raise ValueError(f"{f} has {v.size} entries, expected {n}")
            object.__setattr__(self, f, v.copy())
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.feature_names and len(self.feature_names) != n:
            raise ValueError("feature_names length does not match coefficients")

    @property
    def n_blocks(self):
        return self.utility.size

    @property
    def n_features(self):
        return self.utility_coef.size

    def to_dict(self):
        out = {"n_blocks": self.n_blocks, "feature_names": list(self.feature_names)}
        for f in fields(self):
            if f.name == "feature_names":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d):
        kwargs = {f.name: d[f.name] for f in fields(cls) if f.name in d}
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_utility(self, utility, utility_coef):
        return replace(self, utility=np.asarray(utility, float),
                       utility_coef=np.asarray(utility_coef, float))


@dataclass(frozen=True)
class MarketBid:
    """Concrete per-period bid: utilities (T, B), ramps and bounds (T,)."""

    utility: np.ndarray
    ramp_up: np.ndarray
    ramp_down: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray

    def __len__(self):
        return self.utility.shape[0]

    @property
    def n_blocks(self):
        return self.utility.shape[1]

    @property
    def block_size(self):
        return np.maximum(self.pmax - self.pmin, 0.0) / self.n_blocks

    def slice(self, start, stop):
        return MarketBid(self.utility[start:stop], self.ramp_up[start:stop],
                         self.ramp_down[start:stop], self.pmin[start:stop],
                         self.pmax[start:stop])

    def validate(self, rtol=1e-9):
        """Raise :class:`InfeasibleBidError` naming the first offending period."""
        scale = 1.0 + max(np.max(np.abs(self.pmax)), np.max(np.abs(self.pmin)),
                          np.max(np.abs(self.ramp_up)), np.max(np.abs(self.ramp_down)))
        tol = rtol * scale
        checks = (
            ("pmin >= 0", self.pmin < -tol),
            ("pmin <= pmax", self.pmin - self.pmax > tol),
            ("ramp_up >= -ramp_down", self.ramp_up + self.ramp_down < -tol),
            ("utility non-increasing", np.any(np.diff(self.utility, axis=1) > tol, axis=1)),
        )
        for invariant, bad in checks:
            if np.any(bad):
                t = int(np.argmax(bad))
                raise InfeasibleBidError(
                    f"bid infeasible in period {t}: violates {invariant}", t, invariant)
        return self

    def to_text(self, labels=None):
        """Human-readable bid file: B (price, energy) steps plus ramp/bound lines."""
        lines = [f"# complex market bid: {len(self)} periods, {self.n_blocks} blocks"]
        size = self.block_size
        for t in range(len(self)):
            label = labels[t] if labels is not None else t
            lines.append(f"period {label}")
            lines.append(f"  pmin {float(self.pmin[t])!r}")
            lines.append(f"  pmax {float(self.pmax[t])!r}")
            lines.append(f"  ramp_up {float(self.ramp_up[t])!r}")
            lines.append(f"  ramp_down {float(self.ramp_down[t])!r}")
            for b in range(self.n_blocks):
                lines.append(f"  block {b + 1} price {float(self.utility[t, b])!r} "
                             f"energy {float(size[t])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        periods = []
        for line in text.splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "period":
                periods.append({"blocks": []})
            elif parts[0] == "block":
                periods[-1]["blocks"].append(float(parts[3]))
            else:
                periods[-1][parts[0]] = float(parts[1])
        return cls(
            utility=np.array([p["blocks"] for p in periods], dtype=float),
            ramp_up=np.array([p["ramp_up"] for p in periods]),
            ramp_down=np.array([p["ramp_down"] for p in periods]),
            pmin=np.array([p["pmin"] for p in periods]),
            pmax=np.array([p["pmax"] for p in periods]),
        )


def _feature_matrix(features, n_features, n_periods=None):
    if features is None:
        if n_features:
            raise ValueError(f"model expects {n_features} features, none given")
        return np.zeros((n_periods or 1, 0))
    Z = np.asarray(features, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(1, -1) if n_features and Z.size == n_features else Z.reshape(-1, 1)
    if Z.shape[1] != n_features:
        raise ValueError(f"feature dimension {Z.shape[1]} does not match model ({n_features})")
    return Z


def materialize_bid(model, features, validate=True):
    """Evaluate the affine bid parameters on feature rows ``features`` (T, I)."""
    Z = _feature_matrix(features, model.n_features)
    bid = MarketBid(
        utility=model.utility[None, :] + (Z @ model.utility_coef)[:, None],
        ramp_up=model.ramp_up + Z @ model.ramp_up_coef,
        ramp_down=model.ramp_down + Z @ model.ramp_down_coef,
        pmin=model.pmin + Z @ model.pmin_coef,
        pmax=model.pmax + Z @ model.pmax_coef,
    )
    return bid.validate() if validate else bid


def build_consumer_lp(bid, prices):
    """Welfare-maximisation LP over the horizon of ``bid``.

    Rows: ``ramp_up`` and ``ramp_down`` for periods 2..T, ``cap`` per block;
    block consumptions ``x`` are bounded below by zero.
    """
    prices = np.asarray(prices, dtype=float)
    T, B = bid.utility.shape
    if prices.shape != (T,):
        raise ValueError(f"expected {T} prices, got shape {prices.shape}")
    lp = LpProblem(sense="max", name="consumer")
    x = lp.add_variables("x", (T, B), lb=0.0)
    lp.add_objective(bid.utility - prices[:, None], x)
    if T > 1:
        dmin = bid.pmin[1:] - bid.pmin[:-1]
        lp.add_constraints("ramp_up", [(1.0, x[1:]), (-1.0, x[:-1])], "<=",
                           bid.ramp_up[1:] - dmin)
        lp.add_constraints("ramp_down", [(1.0, x[:-1]), (-1.0, x[1:])], "<=",
                           bid.ramp_down[1:] + dmin)
    lp.add_constraints("cap", [(1.0, x)], "<=", np.broadcast_to(bid.block_size[:, None], (T, B)))
    return lp


@dataclass
class ConsumptionSolution:
    blocks: np.ndarray
    pmin: np.ndarray
    lambda_up: np.ndarray
    lambda_down: np.ndarray
    psi_upper: np.ndarray
    psi_lower: np.ndarray
    objective: float
    status: str = "optimal"

    @property
    def total(self):
        return self.pmin + self.blocks.sum(axis=1)


def welfare(bid, prices, blocks):
    return float(np.sum((bid.utility - np.asarray(prices)[:, None]) * blocks))


def repair_ramps(bid):
    """Widen ramp limits just enough that the all-empty schedule is feasible.

    The robust rows keep each period well posed, but a minimum-load step
    between two periods with different features can still exceed the ramp
    limit.  Raising ``ramp_up`` to the upward step and ``ramp_down`` to the
    downward step restores feasibility.  Returns the bid and the periods changed.
    """
    step = np.r_[0.0, np.diff(bid.pmin)]
    up, down = np.maximum(bid.ramp_up, step), np.maximum(bid.ramp_down, -step)
    changed = np.flatnonzero((up > bid.ramp_up) | (down > bid.ramp_down))
    changed = changed[changed > 0]
    return replace(bid, ramp_up=up, ramp_down=down), changed


def simulate(model, prices, features=None, deterministic=False, tol=DEFAULT_TOL,
             repair=False):
    """Optimal consumption of the pool for ``prices``.

    ``model`` is a :class:`BidModel` (materialised on ``features``) or an
    already materialised :class:`MarketBid`.  With ``deterministic=True`` a
    second LP picks, among the welfare-optimal schedules, the one with the
    least consumption in later blocks: earlier blocks fill first and blocks
    priced exactly at their utility stay empty.  Duals come from the first
    solve; they remain complementary to every optimal schedule.

    With ``repair=True`` an infeasible horizon is re-solved once after
    :func:`repair_ramps`, with a warning; forecasting uses this so one bad
    period transition does not abort a backtest.
    """
    prices = np.asarray(prices, dtype=float)
    if isinstance(model, MarketBid):
        bid = model
    else:
        bid = materialize_bid(model, _feature_matrix(features, model.n_features, len(prices)))
    T, B = bid.utility.shape
    lp = build_consumer_lp(bid, prices)
    sol = solve(lp, tol=tol)
    if repair and sol.status == "infeasible":
        bid, changed = repair_ramps(bid)
        warnings.warn(f"consumer LP infeasible; ramp limits widened in periods "
                      f"{changed.tolist()}", RepairWarning, stacklevel=2)
        lp = build_consumer_lp(bid, prices)
        sol = solve(lp, tol=tol)
    sol.raise_for_status()
    x = sol.value("x")
    if deterministic:
        x = _lexicographic_schedule(lp, sol, tol)
    blocks = np.clip(x, 0.0, bid.block_size[:, None])
    empty = np.zeros(max(T - 1, 0))
    return ConsumptionSolution(
        blocks=blocks,
        pmin=bid.pmin.copy(),
        lambda_up=sol.dual("ramp_up") if T > 1 else empty,
        lambda_down=sol.dual("ramp_down") if T > 1 else empty,
        psi_upper=sol.dual("cap"),
        psi_lower=sol.lower_dual("x"),
        objective=welfare(bid, prices, blocks),
    )


def _lexicographic_schedule(lp, sol, tol):
    """Least later-block consumption over the optimal face of ``lp``.

    The face is cut out by complementarity with the first solve's duals:
    rows with a positive dual hold with equality and blocks with a positive
    reduced cost stay empty.
    """
    lp = lp.copy()
    x = lp.index("x")
    T, B = x.shape
    for name in lp.con_blocks:
        lp.set_relation(name, "==", sol.dual(name) > tol)
    lp.set_bounds("x", ub=0.0, mask=sol.lower_dual("x") > tol)
    lp.set_objective(-np.broadcast_to(np.arange(1.0, B + 1.0), (T, B)), x)
    return solve(lp, tol=tol).raise_for_status().value("x")


def stationarity_lhs(lambda_up, lambda_down, psi_upper, psi_lower):
    """Left-hand side of the dual stationarity rows, shape (T, B).

    Period 1 only sees the ramp duals of period 2, period T only its own, and
    interior periods both, which reproduces the three stationarity forms.
    """
    T = psi_upper.shape[0]
    ramp = np.zeros(T)
    ramp[1:] += lambda_up - lambda_down
    ramp[:-1] -= lambda_up - lambda_down
    return ramp[:, None] + psi_upper - psi_lower


def kkt_residuals(bid, prices, solution):
    """Infinity-norm residuals of the lower-level KKT system at ``solution``."""
    prices = np.asarray(prices, dtype=float)
    x = solution.blocks
    cap = bid.block_size[:, None]
    X = x.sum(axis=1)
    dmin = np.diff(bid.pmin)
    slack_up = bid.ramp_up[1:] - dmin - (X[1:] - X[:-1])
    slack_down = bid.ramp_down[1:] + dmin - (X[:-1] - X[1:])
    slack_cap = cap - x
    lam_u, lam_d = solution.lambda_up, solution.lambda_down
    psi_u, psi_l = solution.psi_upper, solution.psi_lower

    stationarity = stationarity_lhs(lam_u, lam_d, psi_u, psi_l) - (bid.utility - prices[:, None])
    primal = np.concatenate([np.maximum(-slack_up, 0), np.maximum(-slack_down, 0),
                             np.maximum(-slack_cap, 0).ravel(), np.maximum(-x, 0).ravel()])
    dual = np.concatenate([np.maximum(-lam_u, 0), np.maximum(-lam_d, 0),
                           np.maximum(-psi_u, 0).ravel(), np.maximum(-psi_l, 0).ravel()])
    comp = np.concatenate([lam_u * slack_up, lam_d * slack_down,
                           (psi_u * slack_cap).ravel(), (psi_l * x).ravel()])
    norm = lambda a: float(np.max(np.abs(a))) if np.size(a) else 0.0
    return {"stationarity": norm(stationarity), "primal": norm(primal),
            "dual": norm(dual), "complementarity": norm(comp)}
