"""Robust feasibility of affine bids over a box of feature values.

Three families keep every materialised bid well posed for all features in the
box: ``pmin <= pmax``, ``pmin >= 0`` and ``ramp_up + ramp_down >= 0``.  Each
is a constraint ``intercept_part + max_{Z in box} d'Z <= 0``; the inner
maximisation is replaced by its LP dual, with one pair of nonnegative
multipliers per feature, which keeps the estimation problem linear.

The bounds family is the one written out for the original estimation method.
The nonnegativity and ramp families are derived the same way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consumer import materialize_bid
from .lp import LpProblem, solve

FAMILIES = ("bounds", "nonneg", "ramp")


def worst_case(direction, lower, upper):
    """``max d'Z`` over the box, by picking the better corner per coordinate."""
    d = np.asarray(direction, dtype=float)
    return float(np.sum(np.maximum(d * np.asarray(upper), d * np.asarray(lower))))


def worst_case_dual(direction, lower, upper):
    """The same maximum computed from its dual LP.

    ``min sum(up * upper - down * lower)`` s.t. ``up - down = d``, ``up, down >= 0``.
    """
    d = np.asarray(direction, dtype=float)
    if d.size == 0:
        return 0.0
    lp = LpProblem("min", name="box-dual")
    up = lp.add_variables("up", d.size, lb=0.0)
    down = lp.add_variables("down", d.size, lb=0.0)
    lp.add_objective(np.asarray(upper, float), up)
    lp.add_objective(-np.asarray(lower, float), down)
    lp.add_constraints("match", [(1.0, up), (-1.0, down)], "==", d)
    return solve(lp, tol=1e-10).raise_for_status().objective


@dataclass
class RobustHandles:
    """Variable and row indices created by :func:`emit_robust_rows`."""

    duals: dict
    rows: dict


def emit_robust_rows(lp, ranges, params):
    """Add the robust-counterpart rows of all three families to ``lp``.

    ``params`` maps ``pmin``, ``pmax``, ``ramp_up``, ``ramp_down`` to the LP
    index of the intercept and ``<name>_coef`` to the coefficient index
    vectors.  Coefficients are time invariant, so one row set covers every
    period.
    """
    lo, hi = ranges.lower, ranges.upper
    n = lo.size
    families = {
        # pmin0 - pmax0 + max (a_pmin - a_pmax)'Z <= 0
        "bounds": ([(1.0, params["pmin"]), (-1.0, params["pmax"])],
                   [(1.0, params["pmin_coef"]), (-1.0, params["pmax_coef"])]),
        # -pmin0 + max (-a_pmin)'Z <= 0
        "nonneg": ([(-1.0, params["pmin"])], [(-1.0, params["pmin_coef"])]),
        # -(ru0 + rd0) + max (-(a_u + a_d))'Z <= 0
        "ramp": ([(-1.0, params["ramp_up"]), (-1.0, params["ramp_down"])],
                 [(-1.0, params["ramp_up_coef"]), (-1.0, params["ramp_down_coef"])]),
    }
    duals, rows = {}, {}
    for name, (intercept_terms, direction_terms) in families.items():
        up = lp.add_variables(f"robust_{name}_up", n, lb=0.0)
        down = lp.add_variables(f"robust_{name}_down", n, lb=0.0)
        rows[name] = lp.add_constraints(
            f"robust_{name}", intercept_terms + [(hi, up), (-lo, down)], "<=", 0.0)
        if n:
            lp.add_constraints(
                f"robust_{name}_match",
                [(1.0, up), (-1.0, down)] + [(-c, idx) for c, idx in direction_terms],
                "==", np.zeros(n))
        duals[name] = (up, down)
    return RobustHandles(duals, rows)


def robust_margins(model, ranges):
    """Worst-case value of each family over the box (all must be >= 0)."""
    lo, hi = ranges.lower, ranges.upper
    return {
        "bounds": model.pmax - model.pmin - worst_case(model.pmin_coef - model.pmax_coef, lo, hi),
        "nonneg": model.pmin - worst_case(-model.pmin_coef, lo, hi),
        "ramp": model.ramp_up + model.ramp_down
        - worst_case(-(model.ramp_up_coef + model.ramp_down_coef), lo, hi),
    }


def sample_check(model, ranges, n_samples=10_000, rng=None):
    """Smallest value of each invariant over uniform samples from the box."""
    Z = ranges.sample(n_samples, rng)
    bid = materialize_bid(model, Z, validate=False)
    return {
        "pmin": float(bid.pmin.min()),
        "pmax_minus_pmin": float((bid.pmax - bid.pmin).min()),
        "ramp_sum": float((bid.ramp_up + bid.ramp_down).min()),
    }
