"""Second estimation step: re-fit the utility curve by minimising duality gaps.

The bounds and ramp limits from the penalty step are frozen.  Measured loads
are written block by block (highest-utility blocks first) and the utility
intercepts and coefficients are chosen so that this measured consumption is
as close to optimal as possible for the consumer LP, measured by the weighted
sum of per-period duality gaps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .consumer import materialize_bid
from .data import compute_weights
from .estimation import Normalizer, ramp_dual_terms
from .lp import LpProblem, solve

BELOW, INSIDE, ABOVE = -1, 0, 1

log = logging.getLogger(__name__)

# safety valve for the tie-break LP; on timeout the stage-one solution is kept
TIE_BREAK_SECONDS = 60.0


@dataclass
class BlockDecomposition:
    blocks: np.ndarray  # (T, B)
    clip: np.ndarray  # BELOW / INSIDE / ABOVE per period
    missing: np.ndarray

    @property
    def total(self):
        return self.blocks.sum(axis=1)


def block_decompose(load, bid):
    """Greedy block-wise representation of ``load`` under ``bid``.

    The load is clamped to ``[pmin, pmax]`` and poured into blocks 1..B in
    order.  Missing loads (NaN) get empty blocks.
    """
    load = np.asarray(load, dtype=float)
    missing = np.isnan(load)
    x = np.where(missing, bid.pmin, load)
    clip = np.where(x > bid.pmax, ABOVE, np.where(x < bid.pmin, BELOW, INSIDE))
    clip[missing] = INSIDE
    amount = np.clip(x, bid.pmin, bid.pmax) - bid.pmin
    size = bid.block_size
    start = np.arange(bid.n_blocks)[None, :] * size[:, None]
    blocks = np.clip(amount[:, None] - start, 0.0, size[:, None])
    return BlockDecomposition(blocks, clip, missing)


@dataclass
class RefinementResult:
    model: object
    model_normalized: object
    decomposition: BlockDecomposition
    gaps: np.ndarray
    lambda_up: np.ndarray
    lambda_down: np.ndarray
    psi_upper: np.ndarray
    psi_lower: np.ndarray
    objective: float
    prices: np.ndarray
    bid: object

    @property
    def weighted_gap(self):
        return self.objective


def build_refinement_lp(prices, features, bid, decomposition, weights, utility_mask=None):
    """Gap-minimisation LP over utility intercepts, coefficients and consumer duals.

    ``bid`` supplies the frozen bounds and ramps; its utilities are ignored.
    The per-period gap row reads ``primal_t + gap_t = dual_t + coupling_t``
    where the coupling moves each ramp row's ``x_{t-1}`` contribution to the
    period that owns the row, so every gap is a sum of nonnegative
    dual-times-slack products whenever the measured blocks satisfy the ramps.
    """
    prices = np.asarray(prices, dtype=float)
    Z = np.asarray(features, dtype=float)
    T, B = decomposition.blocks.shape
    I = Z.shape[1]
    xm = decomposition.blocks
    X = xm.sum(axis=1)
    cap = bid.block_size
    dmin = np.diff(bid.pmin)

    lp = LpProblem("min", name="refine")
    a0 = lp.add_variables("utility", B, lb=-np.inf)
    free = np.ones(I, bool) if utility_mask is None else np.asarray(utility_mask, bool)
    bound = np.where(free, np.inf, 0.0)
    alpha = lp.add_variables("utility_coef", I, lb=-bound, ub=bound)
    lam_u = lp.add_variables("lam_up", T - 1, lb=0.0)
    lam_d = lp.add_variables("lam_down", T - 1, lb=0.0)
    psi_u = lp.add_variables("psi_up", (T, B), lb=0.0)
    psi_l = lp.add_variables("psi_lo", (T, B), lb=0.0)
    gap = lp.add_variables("gap", T, lb=0.0)

    lp.add_constraints(
        "stationarity",
        ramp_dual_terms(lam_u, lam_d, T, B) + [
            (1.0, psi_u), (-1.0, psi_l),
            (-1.0, np.broadcast_to(a0, (T, B))),
            (-np.broadcast_to(Z[:, None, :], (T, B, I)), np.broadcast_to(alpha, (T, B, I)))],
        "==", -np.broadcast_to(prices[:, None], (T, B)))

    terms = [(xm, np.broadcast_to(a0, (T, B))),
             (X[:, None] * Z, np.broadcast_to(alpha, (T, I))),
             (1.0, gap),
             (-np.broadcast_to(cap[:, None], (T, B)), psi_u)]
    if T > 1:
        rhs_up = bid.ramp_up[1:] - dmin
        rhs_down = bid.ramp_down[1:] + dmin
        own = np.zeros((T, 2))
        own[1:, 0] = -rhs_up - X[:-1]
        own[1:, 1] = -rhs_down + X[:-1]
        nxt = np.zeros((T, 2))
        nxt[:-1, 0] = X[:-1]
        nxt[:-1, 1] = -X[:-1]
        own_idx = np.zeros((T, 2), dtype=int)
        own_idx[1:, 0], own_idx[1:, 1] = lam_u, lam_d
        nxt_idx = np.zeros((T, 2), dtype=int)
        nxt_idx[:-1, 0], nxt_idx[:-1, 1] = lam_u, lam_d
        terms += [(own, own_idx), (nxt, nxt_idx)]
    lp.add_constraints("gap_def", terms, "==", prices * X)
    if B > 1:
        lp.add_constraints("monotone", [(1.0, a0[:-1]), (-1.0, a0[1:])], ">=", np.zeros(B - 1))
    lp.add_objective(np.asarray(weights, dtype=float), gap)
    return lp


def period_gaps(prices, bid, decomposition, lam_u, lam_d, psi_u, psi_l):
    """Per-period duality gap recomputed from complementarity products.

    ``sum_b (cap - x) psi_up + x psi_lo + lam_up * slack_up + lam_down * slack_down``
    """
    xm = decomposition.blocks
    X = xm.sum(axis=1)
    dmin = np.diff(bid.pmin)
    out = np.sum((bid.block_size[:, None] - xm) * psi_u + xm * psi_l, axis=1)
    if len(X) > 1:
        out[1:] += lam_u * (bid.ramp_up[1:] - dmin - np.diff(X))
        out[1:] += lam_d * (bid.ramp_down[1:] + dmin + np.diff(X))
    return out


def add_margin_stage(lp, bid, decomposition, gaps, cap=0.1, slack=1e-10, tol=1e-9):
    """Tie-break among gap-minimising solutions.

    Each period's gap is held at its value ``gaps`` from the first stage
    (which keeps the weighted total optimal) and the smallest dual attached
    to an active primal relation is maximised: ``psi_up`` of full blocks,
    ``psi_lo`` of empty blocks and the multiplier of every binding ramp row.
    A strictly complementary dual pins the measured consumption as the unique
    optimum, so re-simulation does not drift along a flat face.  A small
    average-margin term keeps the stage useful when the minimum is zero.
    """
    lp2 = lp.copy()
    xm = decomposition.blocks
    X = xm.sum(axis=1)
    size = bid.block_size[:, None]
    atol = tol * max(1.0, float(np.abs(X).max(initial=0.0)))
    full = (size > atol) & (xm >= size - atol)
    empty = xm <= atol
    gaps = np.maximum(np.asarray(gaps, dtype=float), 0.0)
    lp2.set_bounds("gap", ub=gaps * (1.0 + 1e-7) + slack)
    floor = lp2.add_variables("margin_floor", lb=0.0, ub=cap)
    active = [np.where(full, lp2.index("psi_up"), lp2.index("psi_lo"))[full | empty]]
    if len(X) > 1:
        dmin = np.diff(bid.pmin)
        up_bind = np.diff(X) >= bid.ramp_up[1:] - dmin - atol
        down_bind = -np.diff(X) >= bid.ramp_down[1:] + dmin - atol
        active += [lp2.index("lam_up")[up_bind], lp2.index("lam_down")[down_bind]]
    active = np.concatenate(active)
    if active.size:
        margin = lp2.add_variables("margin", active.size, lb=0.0, ub=cap)
        lp2.add_constraints("margin_def", [(1.0, margin), (-1.0, active)], "<=",
                            np.zeros(active.size))
        lp2.add_constraints("margin_floor_def", [(1.0, floor), (-1.0, margin)], "<=",
                            np.zeros(active.size))
        lp2.set_objective(-0.01 / active.size, margin)
        lp2.add_objective(-1.0, floor)
    else:
        lp2.set_objective(0.0, floor)
    return lp2


def refine(frame, weights, step1=None, constraint_model=None, config=None, tie_break=True,
           tie_break_cap=0.1):
    """Run the gap-minimisation step on ``frame`` and return the full result.

    Bounds and ramps come from ``step1`` unless ``constraint_model``
    (original units) is given; without ``step1`` a ``config`` is required and
    the normalisation is fitted on ``frame``.  With ``tie_break`` a second LP
    keeps the gap optimal and pushes bound and ramp duals away from zero.
    """
    if step1 is None and (constraint_model is None or config is None):
        raise ValueError("need a step-1 result or a constraint model plus config")
    config = step1.config if config is None else config
    norm = step1.normalizer if step1 is not None else Normalizer.fit(frame, config.standardize)
    weights = (compute_weights(frame, config.forgetting) if weights is None
               else np.asarray(weights, dtype=float))
    nframe = norm.frame(frame)
    base = step1.model if constraint_model is None else constraint_model
    base_n = step1.model_normalized if constraint_model is None else norm.to_normalized(base)
    bid = materialize_bid(base_n, nframe.features, validate=False)
    dec = block_decompose(nframe.load, bid)
    mask = config.feature_mask("utility", frame.feature_names)
    lp = build_refinement_lp(nframe.price, nframe.features, bid, dec, weights, mask)
    sol = solve(lp, tol=config.tol, method=config.solver).raise_for_status()
    if tie_break:
        # the tightest gap slack the solver accepts; presolve occasionally
        # declares the near-degenerate optimal face empty
        for slack in (1e-10, 1e-8, 1e-6):
            lp2 = add_margin_stage(lp, bid, dec, sol.value("gap"), cap=tie_break_cap, slack=slack)
            sol2 = solve(lp2, tol=config.tol, method=config.solver,
                         time_limit=TIE_BREAK_SECONDS)
            if sol2.optimal:
                sol = sol2
                break
            if sol2.status == "error":  # time limit or numerical trouble
                break
        if sol is not sol2:
            log.warning("refinement tie-break stage failed (%s); keeping stage-one duals",
                        sol2.status)

    a0, alpha = sol.value("utility"), sol.value("utility_coef")
    model_n = base_n.with_utility(a0, alpha)
    a0_o, alpha_o = norm.utility_to_original(a0, alpha)
    model = replace(base, utility=a0_o, utility_coef=alpha_o)
    return RefinementResult(
        model=model, model_normalized=model_n, decomposition=dec, gaps=sol.value("gap"),
        lambda_up=sol.value("lam_up"), lambda_down=sol.value("lam_down"),
        psi_upper=sol.value("psi_up"), psi_lower=sol.value("psi_lo"),
        objective=float(weights @ sol.value("gap")), prices=nframe.price,
        bid=materialize_bid(model_n, nframe.features, validate=False),
    )


def refine_utility(frame, weights, step1, constraint_model=None):
    """Step-1 model with its utility intercepts and coefficients re-estimated."""
    return refine(frame, weights, step1, constraint_model=constraint_model).model

