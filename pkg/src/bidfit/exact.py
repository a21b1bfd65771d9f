"""Exact estimation on toy instances by enumerating complementarity patterns.

Every lower-level inequality pairs with one dual.  A pattern decides, for
each pair, whether the inequality is active (enforced as an equality) or its
dual is zero.  With the pattern fixed the bilevel estimation problem is an
LP, so the global optimum is the best of ``2**n_pairs`` LP solves.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .consumer import materialize_bid
from .data import compute_weights, feature_ranges
from .estimation import EstimationResult, Normalizer, _result_from_solution, build_penalty_lp
from .estimation import model_from_solution
from .lp import solve

MAX_PAIRS = 24
MAX_FEATURES = 2


class BudgetExceededError(ValueError):
    """Instance too large for exhaustive pattern enumeration."""


@dataclass
class ExactCertificate:
    n_pairs: int
    n_patterns: int
    n_feasible: int
    best: float
    second_best: float  # smallest objective strictly above ``best``
    pattern: np.ndarray

    def to_dict(self):
        return {"n_pairs": self.n_pairs, "n_patterns": self.n_patterns,
                "n_feasible": self.n_feasible, "best": self.best,
                "second_best": self.second_best, "pattern": self.pattern.astype(int).tolist()}


def n_complementarity_pairs(n_periods, n_blocks):
    """Two ramp rows per period after the first plus two bounds per block and period."""
    return 2 * (n_periods - 1) + 2 * n_blocks * n_periods


def _apply_pattern(lp, active, T, B):
    """Copy of ``lp`` with one complementarity pattern enforced.

    ``active`` is ordered as ramp-up rows, ramp-down rows, cap rows, then
    ``x >= 0``.
    """
    lp = lp.copy()
    k = T - 1
    up, down = active[:k], active[k:2 * k]
    cap = active[2 * k:2 * k + T * B].reshape(T, B)
    low = active[2 * k + T * B:].reshape(T, B)
    if k:
        lp.set_relation("ramp_up", "==", up)
        lp.set_bounds("lam_up", ub=0.0, mask=~up)
        lp.set_relation("ramp_down", "==", down)
        lp.set_bounds("lam_down", ub=0.0, mask=~down)
    lp.set_relation("cap", "==", cap)
    lp.set_bounds("psi_up", ub=0.0, mask=~cap)
    lp.set_bounds("x", ub=0.0, mask=low)
    lp.set_bounds("psi_lo", ub=0.0, mask=~low)
    return lp


def solve_exact(frame, config, weights=None, ranges=None, max_pairs=MAX_PAIRS,
                max_features=MAX_FEATURES, tol=1e-9):
    """Globally optimal bid for the unpenalised estimation problem.

    Returns ``(EstimationResult, ExactCertificate)``.  The objective is the
    weighted absolute error, solved in the same normalised space as the
    penalty method so the two are directly comparable.  Ties between
    patterns go to the first one in enumeration order.
    """
    T, B, I = len(frame), config.n_blocks, frame.n_features
    n_pairs = n_complementarity_pairs(T, B)
    if n_pairs > max_pairs:
        raise BudgetExceededError(
            f"{n_pairs} complementarity pairs (T={T}, B={B}) exceed the budget of {max_pairs}")
    if I > max_features:
        raise BudgetExceededError(f"{I} features exceed the budget of {max_features}")

    config = replace(config, penalty=0.0)
    weights = compute_weights(frame, config.forgetting) if weights is None else np.asarray(weights)
    ranges = feature_ranges(frame, config.margin) if ranges is None else ranges
    norm = Normalizer.fit(frame, config.standardize)
    nframe = norm.frame(frame)
    pen = build_penalty_lp(nframe, weights, config, norm.ranges(ranges))

    objectives = []
    best = None
    for bits in itertools.product((False, True), repeat=n_pairs):
        active = np.array(bits, dtype=bool)
        sol = solve(_apply_pattern(pen.lp, active, T, B), tol=tol)
        if not sol.optimal:
            continue
        objectives.append(sol.objective)
        if best is None or sol.objective < best[0].objective - tol:
            best = (sol, active)
    if best is None:
        raise RuntimeError("no complementarity pattern is feasible")

    sol, active = best
    ordered = np.sort(objectives)
    worse = ordered[ordered > ordered[0] + tol * max(1.0, abs(ordered[0]))]
    model_n = model_from_solution(sol, B, frame.feature_names)
    pen = replace(pen, lp=sol.problem)
    result = _result_from_solution(sol, pen, model_n, norm, nframe, frame, config, weights,
                                   ranges, materialize_bid)
    cert = ExactCertificate(
        n_pairs=n_pairs, n_patterns=2 ** n_pairs, n_feasible=len(objectives),
        best=float(ordered[0]),
        second_best=float(worse[0]) if worse.size else float("inf"),
        pattern=active)
    return result, cert


def exact_objective(frame, config, **kwargs):
    """Weighted absolute error of the exact optimum in original load units."""
    result, _ = solve_exact(frame, config, **kwargs)
    return result.weighted_error


__all__ = ["BudgetExceededError", "EstimationResult", "ExactCertificate",
           "n_complementarity_pairs", "solve_exact", "exact_objective"]
