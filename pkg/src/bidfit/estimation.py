"""Penalty relaxation of the inverse bid-estimation problem.

The exact estimation problem fits bid parameters so that the lower-level
consumer LP reproduces measured loads, with the lower level written through
its KKT conditions.  Here the complementarity conditions are dropped and
replaced by an ``L``-weighted penalty on the inequality duals plus their
slacks, which turns the whole estimation into one LP.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .consumer import BidModel, stationarity_lhs
from .data import MarketData, compute_weights, feature_ranges, indicator_columns
from .lp import DEFAULT_TOL, LpProblem, solve
from .robust import emit_robust_rows

FAMILIES = ("utility", "ramp_up", "ramp_down", "pmin", "pmax")


@dataclass
class EstimationConfig:
    """Settings shared by both estimation steps.

    ``features`` optionally restricts, per parameter family, which feature
    columns (names or positions) enter that family's affine map.
    """

    n_blocks: int = 12
    penalty: float = 0.1
    forgetting: float = 1.0
    features: dict = field(default_factory=dict)
    tol: float = DEFAULT_TOL
    weight_up: float = 1.0
    weight_down: float = 1.0
    margin: float = 0.1
    standardize: bool = True
    solver: str = "highs-ipm"

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.penalty < 0 or self.forgetting < 0:
            raise ValueError("penalty and forgetting must be nonnegative")
        if self.weight_up < 0 or self.weight_down < 0:
            raise ValueError("error weights must be nonnegative")
        unknown = set(self.features) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown parameter families {sorted(unknown)}")

    def feature_mask(self, family, names):
        names = list(names)
        sel = self.features.get(family)
        if sel is None:
            return np.ones(len(names), dtype=bool)
        mask = np.zeros(len(names), dtype=bool)
        for s in sel:
            mask[names.index(s) if isinstance(s, str) else int(s)] = True
        return mask

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Normalizer:
    """Feature standardisation plus price and load scales.

    Estimation runs on standardised features (indicators untouched) with
    prices and loads divided by their medians; :meth:`to_original` maps a
    model fitted in that space back to original units.
    """

    feature_shift: np.ndarray
    feature_scale: np.ndarray
    price_scale: float = 1.0
    load_scale: float = 1.0

    @classmethod
    def fit(cls, frame, standardize=True):
        Z = frame.features
        shift = np.zeros(Z.shape[1])
        scale = np.ones(Z.shape[1])
        if standardize and Z.shape[1]:
            cont = ~indicator_columns(Z)
            sd = Z.std(axis=0)
            use = cont & (sd > 0)
            shift[cont] = Z[:, cont].mean(axis=0)
            scale[use] = sd[use]
        measured = frame.load[(frame.gap == 1) & (frame.load > 0)]
        load_scale = float(np.median(measured)) if measured.size else 1.0
        p = np.abs(frame.price[frame.price != 0])
        price_scale = float(np.median(p)) if p.size else 1.0
        return cls(shift, scale, price_scale, load_scale)

    def features(self, Z):
        return (np.asarray(Z, dtype=float) - self.feature_shift) / self.feature_scale

    def frame(self, frame):
        return replace(frame, price=frame.price / self.price_scale,
                       load=frame.load / self.load_scale,
                       features=self.features(frame.features))

    def ranges(self, ranges):
        return ranges.transform(self.feature_shift, self.feature_scale)

    def to_original(self, model):
        def conv(intercept, coef, unit):
            coef_o = unit * coef / self.feature_scale
            return unit * intercept - coef_o @ self.feature_shift, coef_o

        sp, sx = self.price_scale, self.load_scale
        a0 = sp * model.utility - (sp * model.utility_coef / self.feature_scale) @ self.feature_shift
        ru, ru_c = conv(model.ramp_up, model.ramp_up_coef, sx)
        rd, rd_c = conv(model.ramp_down, model.ramp_down_coef, sx)
        lo, lo_c = conv(model.pmin, model.pmin_coef, sx)
        hi, hi_c = conv(model.pmax, model.pmax_coef, sx)
        return BidModel(a0, ru, rd, lo, hi, sp * model.utility_coef / self.feature_scale,
                        ru_c, rd_c, lo_c, hi_c, model.feature_names)

    def utility_to_original(self, utility, utility_coef):
        sp = self.price_scale
        coef = sp * np.asarray(utility_coef) / self.feature_scale
        return sp * np.asarray(utility) - coef @ self.feature_shift, coef

    def to_normalized(self, model):
        def conv(intercept, coef, unit):
            return (intercept + coef @ self.feature_shift) / unit, coef * self.feature_scale / unit

        sp, sx = self.price_scale, self.load_scale
        a0 = (model.utility + model.utility_coef @ self.feature_shift) / sp
        ru, ru_c = conv(model.ramp_up, model.ramp_up_coef, sx)
        rd, rd_c = conv(model.ramp_down, model.ramp_down_coef, sx)
        lo, lo_c = conv(model.pmin, model.pmin_coef, sx)
        hi, hi_c = conv(model.pmax, model.pmax_coef, sx)
        return BidModel(a0, ru, rd, lo, hi, model.utility_coef * self.feature_scale / sp,
                        ru_c, rd_c, lo_c, hi_c, model.feature_names)

    def to_dict(self):
        return {"feature_shift": self.feature_shift.tolist(),
                "feature_scale": self.feature_scale.tolist(),
                "price_scale": self.price_scale, "load_scale": self.load_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature_shift"], float), np.asarray(d["feature_scale"], float),
                   float(d["price_scale"]), float(d["load_scale"]))


def add_bid_parameters(lp, n_blocks, names, config):
    """Declare intercepts and coefficients of every family; excluded features are fixed at 0."""
    I = len(names)
    idx = {"utility": lp.add_variables("utility", n_blocks, lb=-np.inf)}
    for fam in ("ramp_up", "ramp_down", "pmin", "pmax"):
        idx[fam] = lp.add_variables(fam, (), lb=-np.inf)
    for fam in FAMILIES:
        free = config.feature_mask(fam, names)
        bound = np.where(free, np.inf, 0.0)
        idx[f"{fam}_coef"] = lp.add_variables(f"{fam}_coef", I, lb=-bound, ub=bound)
    return idx


def affine_terms(idx, family, Z, coef=1.0, rows=slice(None), width=None):
    """Terms of ``coef * (intercept + Z[rows] @ family_coef)`` for a row block over periods.

    With ``width`` the terms are repeated along a trailing block axis, giving
    a (T, width) row block.
    """
    Zr = Z[rows]
    T = Zr.shape[0]
    c = np.broadcast_to(np.asarray(coef, dtype=float), (T,))
    if width is None:
        return [(c, np.broadcast_to(idx[family], (T,))),
                (c[:, None] * Zr, np.broadcast_to(idx[f"{family}_coef"], Zr.shape))]
    shape = (T, width)
    return [(np.broadcast_to(c[:, None], shape), np.broadcast_to(idx[family], shape)),
            (np.broadcast_to((c[:, None] * Zr)[:, None, :], shape + Zr.shape[1:]),
             np.broadcast_to(idx[f"{family}_coef"], shape + Zr.shape[1:]))]


def ramp_dual_terms(lam_u, lam_d, T, B):
    """Ramp-dual part of the stationarity rows over a (T, B) block.

    Period t carries ``+lam_up_t - lam_down_t`` (t >= 2) and
    ``-lam_up_{t+1} + lam_down_{t+1}`` (t <= T-1).
    """
    if T < 2:
        return []
    own = np.zeros((T, B))
    own[1:] = 1.0
    nxt = np.zeros((T, B))
    nxt[:-1] = 1.0
    # index 0 is a placeholder where the coefficient is zero (dropped on assembly)
    u_own = np.zeros((T, B), dtype=int)
    u_own[1:] = lam_u[:, None]
    d_own = np.zeros((T, B), dtype=int)
    d_own[1:] = lam_d[:, None]
    u_nxt = np.zeros((T, B), dtype=int)
    u_nxt[:-1] = lam_u[:, None]
    d_nxt = np.zeros((T, B), dtype=int)
    d_nxt[:-1] = lam_d[:, None]
    return [(own, u_own), (-own, d_own), (-nxt, u_nxt), (nxt, d_nxt)]


def add_lower_level(lp, idx, Z, prices, n_blocks):
    """Primal feasibility, dual feasibility and stationarity of the consumer LP.

    Returns the index arrays of ``x``, ``lam_up``, ``lam_down``, ``psi_up``
    and ``psi_lo``.
    """
    T, B = len(prices), n_blocks
    x = lp.add_variables("x", (T, B), lb=0.0)
    lam_u = lp.add_variables("lam_up", T - 1, lb=0.0)
    lam_d = lp.add_variables("lam_down", T - 1, lb=0.0)
    psi_u = lp.add_variables("psi_up", (T, B), lb=0.0)
    psi_l = lp.add_variables("psi_lo", (T, B), lb=0.0)
    if T > 1:
        now, prev = slice(1, None), slice(None, -1)
        dmin = affine_terms(idx, "pmin", Z, 1.0, now) + affine_terms(idx, "pmin", Z, -1.0, prev)
        lp.add_constraints(
            "ramp_up",
            dmin + [(1.0, x[1:]), (-1.0, x[:-1])] + affine_terms(idx, "ramp_up", Z, -1.0, now),
            "<=", np.zeros(T - 1))
        lp.add_constraints(
            "ramp_down",
            [(-c, i) for c, i in dmin] + [(-1.0, x[1:]), (1.0, x[:-1])]
            + affine_terms(idx, "ramp_down", Z, -1.0, now),
            "<=", np.zeros(T - 1))
    # x_bt <= (pmax_t - pmin_t) / B
    lp.add_constraints(
        "cap",
        [(1.0, x)] + affine_terms(idx, "pmax", Z, -1.0 / B, width=B)
        + affine_terms(idx, "pmin", Z, 1.0 / B, width=B),
        "<=", np.zeros((T, B)))
    # ramp duals + psi_up - psi_lo = a_bt - p_t
    a_terms = [(-1.0, np.broadcast_to(idx["utility"], (T, B))),
               (-np.broadcast_to(Z[:, None, :], (T, B, Z.shape[1])),
                np.broadcast_to(idx["utility_coef"], (T, B, Z.shape[1])))]
    lp.add_constraints(
        "stationarity",
        ramp_dual_terms(lam_u, lam_d, T, B) + [(1.0, psi_u), (-1.0, psi_l)] + a_terms,
        "==", -np.broadcast_to(np.asarray(prices, float)[:, None], (T, B)))
    if B > 1:
        lp.add_constraints("monotone", [(1.0, idx["utility"][:-1]), (-1.0, idx["utility"][1:])],
                           ">=", np.zeros(B - 1))
    return x, lam_u, lam_d, psi_u, psi_l


@dataclass
class PenaltyLp:
    lp: LpProblem
    idx: dict
    weights: np.ndarray


def build_penalty_lp(frame, weights, config, ranges):
    """Assemble the penalised estimation LP for ``frame`` (in the units given)."""
    T, B = len(frame), config.n_blocks
    weights = np.asarray(weights, dtype=float)
    if T < 2:
        raise ValueError("need at least two periods")
    if weights.shape != (T,) or np.any(weights < 0):
        raise ValueError("weights must be a nonnegative vector with one entry per period")
    if not np.any(weights > 0):
        raise ValueError("at least one period needs a positive weight")
    Z = frame.features
    lp = LpProblem("min", name="penalty")
    idx = add_bid_parameters(lp, B, frame.feature_names, config)
    x, lam_u, lam_d, psi_u, psi_l = add_lower_level(lp, idx, Z, frame.price, B)
    e_plus = lp.add_variables("e_plus", T, lb=0.0)
    e_minus = lp.add_variables("e_minus", T, lb=0.0)
    meas = np.where(frame.gap == 1, np.nan_to_num(frame.load), 0.0)
    lp.add_constraints(
        "error",
        affine_terms(idx, "pmin", Z) + [(1.0, x), (-1.0, e_plus), (1.0, e_minus)],
        "==", meas)
    robust = emit_robust_rows(lp, ranges, idx)

    lp.add_objective(config.weight_up * weights, e_plus)
    lp.add_objective(config.weight_down * weights, e_minus)
    L = config.penalty
    if L > 0:
        wb = np.broadcast_to(weights[:, None], (T, B))
        lp.add_objective(L * wb, psi_u)
        lp.add_objective(L * wb, psi_l)
        # sum_b w_t (pmax_t - pmin_t) / B = w_t (pmax_t - pmin_t)
        _add_affine_objective(lp, idx, "pmax", Z, L * weights)
        _add_affine_objective(lp, idx, "pmin", Z, -L * weights)
        if T > 1:
            w = weights[1:]
            lp.add_objective(L * w, lam_u)
            lp.add_objective(L * w, lam_d)
            _add_affine_objective(lp, idx, "ramp_up", Z[1:], L * w)
            _add_affine_objective(lp, idx, "ramp_down", Z[1:], L * w)
    idx.update(x=x, lam_up=lam_u, lam_down=lam_d, psi_up=psi_u, psi_lo=psi_l,
               e_plus=e_plus, e_minus=e_minus, robust=robust)
    return PenaltyLp(lp, idx, weights)


def _add_affine_objective(lp, idx, family, Z, w):
    lp.add_objective(np.sum(w), idx[family])
    lp.add_objective(w @ Z, idx[f"{family}_coef"])


def model_from_solution(sol, n_blocks, names):
    get = sol.value
    return BidModel(
        utility=get("utility"), ramp_up=float(get("ramp_up")), ramp_down=float(get("ramp_down")),
        pmin=float(get("pmin")), pmax=float(get("pmax")),
        utility_coef=get("utility_coef"), ramp_up_coef=get("ramp_up_coef"),
        ramp_down_coef=get("ramp_down_coef"), pmin_coef=get("pmin_coef"),
        pmax_coef=get("pmax_coef"), feature_names=tuple(names))


@dataclass
class EstimationResult:
    """Fitted bid plus everything needed to audit the fit.

    Residuals and block consumptions are in original load units, duals in
    original price units.  ``error_term`` and ``penalty_term`` are the two
    objective components in the normalised space where ``L`` is applied.
    """

    model: BidModel
    model_normalized: BidModel
    normalizer: Normalizer
    config: EstimationConfig
    weights: np.ndarray
    ranges: object
    blocks: np.ndarray
    e_plus: np.ndarray
    e_minus: np.ndarray
    lambda_up: np.ndarray
    lambda_down: np.ndarray
    psi_upper: np.ndarray
    psi_lower: np.ndarray
    error_term: float
    penalty_term: float
    objective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def weighted_error(self):
        """Weighted absolute error in original load units."""
        c = self.config
        return float(np.sum(self.weights * (c.weight_up * self.e_plus + c.weight_down * self.e_minus)))

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "config": self.config.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "ranges": {"lower": self.ranges.lower.tolist(), "upper": self.ranges.upper.tolist()},
            "objective": {"total": self.objective, "error_term": self.error_term,
                          "penalty_term": self.penalty_term,
                          "weighted_error": self.weighted_error},
            "diagnostics": self.diagnostics,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def complementarity_diagnostics(prices, bid, blocks, lam_u, lam_d, psi_u, psi_l):
    """Per-family ``max min(dual, slack)`` and ``max (dual + slack)`` of the consumer LP rows."""
    X = blocks.sum(axis=1)
    dmin = np.diff(bid.pmin)
    slack = {
        "ramp_up": bid.ramp_up[1:] - dmin - np.diff(X),
        "ramp_down": bid.ramp_down[1:] + dmin + np.diff(X),
        "cap": bid.block_size[:, None] - blocks,
        "nonneg": blocks,
    }
    duals = {"ramp_up": lam_u, "ramp_down": lam_d, "cap": psi_u, "nonneg": psi_l}
    out = {}
    for fam in slack:
        s, d = slack[fam], duals[fam]
        viol = np.minimum(np.maximum(s, 0), np.maximum(d, 0))
        out[fam] = {
            "max_violation": float(viol.max()) if viol.size else 0.0,
            "min_surrogate_minus_violation": float((s + d - viol).min()) if viol.size else 0.0,
        }
    return out


def estimate_step1(frame, config, weights=None, ranges=None):
    """Solve the penalised estimation LP and map the optimum to a :class:`EstimationResult`."""
    from .consumer import materialize_bid

    weights = compute_weights(frame, config.forgetting) if weights is None else np.asarray(weights)
    ranges = feature_ranges(frame, config.margin) if ranges is None else ranges
    norm = Normalizer.fit(frame, config.standardize)
    nframe = norm.frame(frame)
    nranges = norm.ranges(ranges)
    pen = build_penalty_lp(nframe, weights, config, nranges)
    sol = solve(pen.lp, tol=config.tol, method=config.solver).raise_for_status()
    model_n = model_from_solution(sol, config.n_blocks, frame.feature_names)
    return _result_from_solution(sol, pen, model_n, norm, nframe, frame, config, weights, ranges,
                                 materialize_bid)


def _result_from_solution(sol, pen, model_n, norm, nframe, frame, config, weights, ranges,
                          materialize_bid):
    get = sol.value
    sx, sp = norm.load_scale, norm.price_scale
    e_plus, e_minus = get("e_plus"), get("e_minus")
    error = float(np.sum(weights * (config.weight_up * e_plus + config.weight_down * e_minus)))
    blocks = get("x")
    lam_u, lam_d = get("lam_up"), get("lam_down")
    psi_u, psi_l = get("psi_up"), get("psi_lo")
    bid_n = materialize_bid(model_n, nframe.features, validate=False)
    penalty = float(np.sum(weights[:, None] * (psi_u + psi_l))
                    + np.sum(weights * (bid_n.pmax - bid_n.pmin))
                    + np.sum(weights[1:] * (lam_u + lam_d + bid_n.ramp_up[1:] + bid_n.ramp_down[1:])))
    diagnostics = complementarity_diagnostics(nframe.price, bid_n, blocks, lam_u, lam_d, psi_u, psi_l)
    diagnostics["kkt"] = vars(sol.residuals)
    stat = stationarity_lhs(lam_u, lam_d, psi_u, psi_l) - (bid_n.utility - nframe.price[:, None])
    diagnostics["stationarity_residual"] = float(np.max(np.abs(stat)))
    return EstimationResult(
        model=norm.to_original(model_n), model_normalized=model_n, normalizer=norm,
        config=config, weights=np.asarray(weights, float), ranges=ranges,
        blocks=blocks * sx, e_plus=e_plus * sx, e_minus=e_minus * sx,
        lambda_up=lam_u * sp, lambda_down=lam_d * sp, psi_upper=psi_u * sp, psi_lower=psi_l * sp,
        error_term=error, penalty_term=penalty, objective=float(sol.objective),
        diagnostics=diagnostics)
