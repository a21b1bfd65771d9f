"""Block-structured linear programs with primal/dual solutions.

Variables and constraints are declared in named, array-shaped blocks so the
bid-estimation models can be written with numpy broadcasting instead of
row-by-row loops.  Solving is delegated to HiGHS (through scipy); the residual
report is computed here, independently of the solver.

Dual sign convention: every inequality is normalised to ``<=`` in a
minimisation.  The reported dual of an inequality row is the objective
improvement per unit relaxation of its right-hand side, so it is nonnegative
for both ``<=`` and ``>=`` rows, and for both ``min`` and ``max`` problems.
Equality duals follow the same rule and are free in sign.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

LE, EQ, GE = -1, 0, 1
_SENSES = {"<=": LE, "==": EQ, "=": EQ, ">=": GE}
_HIGHS_STATUS = {0: "optimal", 2: "infeasible", 3: "unbounded"}

DEFAULT_TOL = 1e-7


class LpError(RuntimeError):
    """Raised when an LP cannot be solved to optimality."""

    def __init__(self, message, status="error"):
        super().__init__(message)
        self.status = status


@dataclass
class _Block:
    name: str
    start: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=int))

    def indices(self):
        return np.arange(self.start, self.start + self.size).reshape(self.shape)


class LpProblem:
    """A linear program assembled from named variable and constraint blocks.

    >>> lp = LpProblem(sense="max")
    >>> x = lp.add_variables("x", lb=0.0)
    >>> lp.add_objective(1.0, x)
    >>> _ = lp.add_constraints("cap", [(1.0, x)], "<=", 3.0)
    >>> round(solve(lp).objective, 6)
    3.0
    """

    def __init__(self, sense="min", name="lp"):
        if sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")
        self.sense = sense
        self.name = name
        self.var_blocks: dict[str, _Block] = {}
        self.con_blocks: dict[str, _Block] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rhs: list[np.ndarray] = []
        self._sense: list[np.ndarray] = []
        self.n_vars = 0
        self.n_cons = 0
        self._cost_idx: list[np.ndarray] = []
        self._cost_val: list[np.ndarray] = []
        self.objective_offset = 0.0
        self._cache = None

    # -- declaration -----------------------------------------------------

    def add_variables(self, name, shape=(), lb=0.0, ub=np.inf):
        """Declare a block of variables and return its index array."""
        if name in self.var_blocks:
            raise ValueError(f"duplicate variable block {name!r}")
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        shape = tuple(int(s) for s in shape)
        block = _Block(name, self.n_vars, shape)
        lb = np.broadcast_to(np.asarray(lb, dtype=float), shape).ravel().copy()
        ub = np.broadcast_to(np.asarray(ub, dtype=float), shape).ravel().copy()
        if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
            raise ValueError(f"NaN bound in variable block {name!r}")
        self.var_blocks[name] = block
        self._lb.append(lb)
        self._ub.append(ub)
        self.n_vars += block.size
        self._cache = None
        idx = block.indices()
        return idx if shape else idx.reshape(())

    def add_objective(self, coef, idx):
        """Add ``sum(coef * var[idx])`` to the objective (broadcasting)."""
        coef, idx = np.broadcast_arrays(np.asarray(coef, dtype=float), np.asarray(idx))
        _check_finite(coef, "objective")
        self._cost_idx.append(idx.ravel().astype(int))
        self._cost_val.append(coef.ravel().copy())
        self._cache = None

    def add_constraints(self, name, terms, sense, rhs, shape=None):
        """Declare a block of constraints ``sum(terms) <sense> rhs``.

        Each term is ``(coef, idx)``.  ``coef`` and ``idx`` broadcast against
        each other; leading axes align with the constraint shape and any extra
        trailing axes are summed, so ``(1.0, x)`` with ``x`` of shape (T, B)
        contributes ``sum_b x[t, b]`` to a row block of shape (T,).
        """
        if name in self.con_blocks:
            raise ValueError(f"duplicate constraint block {name!r}")
        if sense not in _SENSES:
            raise ValueError(f"unknown relation {sense!r}")
        if shape is None:
            shape = np.shape(rhs)
        shape = tuple(shape)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), shape)
        _check_finite(rhs, f"rhs of {name!r}")
        block = _Block(name, self.n_cons, shape)
        row_ids = block.indices()
        nd = len(shape)
        for coef, idx in terms:
            coef = np.asarray(coef, dtype=float)
            idx = np.asarray(idx)
            coef, idx = np.broadcast_arrays(coef, idx)
            full = shape + coef.shape[nd:] if coef.ndim > nd else shape
            coef = np.broadcast_to(coef, full)
            idx = np.broadcast_to(idx, full)
            rows = np.broadcast_to(row_ids.reshape(shape + (1,) * (len(full) - nd)), full)
            _check_finite(coef, f"coefficients of {name!r}")
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_vars):
                raise ValueError(f"constraint {name!r} references an undeclared variable")
            keep = coef != 0.0
            self._rows.append(rows[keep].ravel())
            self._cols.append(idx[keep].ravel().astype(int))
            self._vals.append(coef[keep].ravel())
        self._rhs.append(rhs.ravel().copy())
        self._sense.append(np.full(block.size, _SENSES[sense], dtype=int))
        self.con_blocks[name] = block
        self.n_cons += block.size
        self._cache = None
        return row_ids

    def index(self, name):
        """Index array of a declared variable block."""
        idx = self.var_blocks[name].indices()
        return idx.reshape(self.var_blocks[name].shape)

    def set_objective(self, coef, idx):
        """Replace the objective by ``sum(coef * var[idx])``."""
        self._cost_idx, self._cost_val = [], []
        self.objective_offset = 0.0
        self.add_objective(coef, idx)

    # -- modification (used before solving, e.g. for pattern enumeration) --

    def copy(self):
        return copy.deepcopy(self)

    def set_bounds(self, name, lb=None, ub=None, mask=None):
        block = self.var_blocks[name]
        lbs, ubs = self._bounds()
        idx = block.indices()
        sel = idx if mask is None else idx[np.asarray(mask, dtype=bool)]
        if lb is not None:
            lbs[sel] = lb
        if ub is not None:
            ubs[sel] = ub
        self._lb, self._ub = [lbs], [ubs]
        self._cache = None

    def set_relation(self, name, sense, mask=None):
        block = self.con_blocks[name]
        senses = np.concatenate(self._sense) if self._sense else np.zeros(0, int)
        idx = block.indices()
        sel = idx if mask is None else idx[np.asarray(mask, dtype=bool)]
        senses[sel] = _SENSES[sense]
        self._sense = [senses]
        self._cache = None

    # -- assembled arrays --------------------------------------------------

    def _bounds(self):
        lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        return lb, ub

    def arrays(self):
        """Return ``(c, A, rhs, senses, lb, ub)`` in the declared sense."""
        if self._cache is None:
            c = np.zeros(self.n_vars)
            if self._cost_idx:
                np.add.at(c, np.concatenate(self._cost_idx), np.concatenate(self._cost_val))
            if self._rows:
                rows = np.concatenate(self._rows)
                cols = np.concatenate(self._cols)
                vals = np.concatenate(self._vals)
            else:
                rows = cols = np.zeros(0, int)
                vals = np.zeros(0)
            A = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_cons, self.n_vars))
            rhs = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
            senses = np.concatenate(self._sense) if self._sense else np.zeros(0, int)
            lb, ub = self._bounds()
            self._cache = (c, A, rhs, senses, lb, ub)
        return self._cache

    def variable_names(self):
        names = []
        for block in self.var_blocks.values():
            if block.shape:
                names.extend(f"{block.name}[{','.join(map(str, i))}]"
                             for i in np.ndindex(*block.shape))
            else:
                names.append(block.name)
        return names

    def constraint_names(self):
        names = []
        for block in self.con_blocks.values():
            if block.shape:
                names.extend(f"{block.name}[{','.join(map(str, i))}]"
                             for i in np.ndindex(*block.shape))
            else:
                names.append(block.name)
        return names

    def to_lp_text(self):
        """Render the problem in CPLEX LP format for external cross-checks."""
        c, A, rhs, senses, lb, ub = self.arrays()
        vnames = [_lp_name(n) for n in self.variable_names()]
        cnames = [_lp_name(n) for n in self.constraint_names()]
        out = ["\\ " + self.name, "Maximize" if self.sense == "max" else "Minimize"]
        out.append(" obj: " + (_lp_expr(c, range(self.n_vars), vnames) or "0 " + vnames[0]))
        out.append("Subject To")
        A = A.tocsr()
        op = {LE: "<=", EQ: "=", GE: ">="}
        for i in range(self.n_cons):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            expr = _lp_expr(A.data[lo:hi], A.indices[lo:hi], vnames) or "0 " + vnames[0]
            out.append(f" {cnames[i]}: {expr} {op[senses[i]]} {float(rhs[i])!r}")
        out.append("Bounds")
        for j, name in enumerate(vnames):
            lo = "-inf" if np.isneginf(lb[j]) else repr(float(lb[j]))
            hi = "+inf" if np.isposinf(ub[j]) else repr(float(ub[j]))
            out.append(f" {lo} <= {name} <= {hi}")
        out.append("End")
        return "\n".join(out) + "\n"


def _lp_name(name):
    return name.replace("[", "(").replace("]", ")").replace(",", "_")


def _lp_expr(vals, cols, names):
    parts = []
    for v, j in zip(vals, cols):
        if v != 0:
            parts.append(f"{'+' if v >= 0 else '-'} {float(abs(v))!r} {names[j]}")
    return " ".join(parts)


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite value in {what}")


@dataclass
class KktReport:
    """Infinity-norm KKT residuals of a primal/dual pair."""

    primal: float
    stationarity: float
    dual: float
    complementarity: float
    gap: float

    def max(self):
        return max(self.primal, self.stationarity, self.dual, self.complementarity)

    def ok(self, tol):
        return self.max() <= tol


@dataclass
class LpSolution:
    status: str
    objective: float = np.nan
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lower_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    upper_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residuals: KktReport | None = None
    message: str = ""
    problem: LpProblem | None = field(default=None, repr=False)

    @property
    def optimal(self):
        return self.status == "optimal"

    def value(self, name):
        block = self.problem.var_blocks[name]
        return self.x[block.start:block.start + block.size].reshape(block.shape)

    def dual(self, name):
        block = self.problem.con_blocks[name]
        return self.duals[block.start:block.start + block.size].reshape(block.shape)

    def lower_dual(self, name):
        block = self.problem.var_blocks[name]
        return self.lower_duals[block.start:block.start + block.size].reshape(block.shape)

    def raise_for_status(self):
        if not self.optimal:
            raise LpError(f"LP {self.problem.name!r} not solved: {self.status} "
                          f"({self.message})", self.status)
        return self


def _min_form(problem):
    """Normalise to min c'x, A_ub x <= b_ub, A_eq x = b_eq."""
    c, A, rhs, senses, lb, ub = problem.arrays()
    sign = -1.0 if problem.sense == "max" else 1.0
    flip = np.where(senses == GE, -1.0, 1.0)
    A_n = sp.diags(flip) @ A
    return sign * c, A_n.tocsr(), flip * rhs, senses, lb, ub, flip, sign


def check_kkt(problem, solution, x=None, duals=None):
    """Residuals of the KKT system at ``solution`` (or at overrides ``x``/``duals``).

    Primal: bound and row violations.  Stationarity: the part of the reduced
    cost vector that cannot be carried by bound multipliers.  Dual: negativity
    of inequality duals.  Complementarity: ``|dual * slack|`` over rows and
    bounds.  ``gap`` is the absolute primal-dual objective difference.
    """
    c, A, b, senses, lb, ub, flip, sign = _min_form(problem)
    x = solution.x if x is None else np.asarray(x, float)
    y = solution.duals if duals is None else np.asarray(duals, float)
    ineq = senses != EQ

    ax = A @ x
    viol_rows = np.where(ineq, np.maximum(ax - b, 0.0), np.abs(ax - b))
    viol_bounds = np.maximum(np.maximum(lb - x, x - ub), 0.0)
    primal = max(_inf_norm(viol_rows), _inf_norm(viol_bounds))

    z = c + A.T @ y
    has_lb, has_ub = np.isfinite(lb), np.isfinite(ub)
    zl = np.where(has_lb, np.maximum(z, 0.0), 0.0)
    zu = np.where(has_ub, np.maximum(-z, 0.0), 0.0)
    stationarity = _inf_norm(z - zl + zu)
    dual = _inf_norm(np.maximum(-y[ineq], 0.0))

    slack = b - ax
    comp_rows = np.abs(y[ineq] * slack[ineq])
    comp_lb = np.abs(zl[has_lb] * (x[has_lb] - lb[has_lb]))
    comp_ub = np.abs(zu[has_ub] * (ub[has_ub] - x[has_ub]))
    complementarity = max(_inf_norm(comp_rows), _inf_norm(comp_lb), _inf_norm(comp_ub))

    primal_obj = c @ x
    dual_obj = -(b @ y) + zl[has_lb] @ lb[has_lb] - zu[has_ub] @ ub[has_ub]
    return KktReport(primal, stationarity, dual, complementarity,
                     float(abs(primal_obj - dual_obj)))


def _inf_norm(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def solve(problem, tol=DEFAULT_TOL, method="highs-ds", time_limit=None):
    """Solve ``problem`` and return an :class:`LpSolution`.

    Statuses are ``optimal``, ``infeasible``, ``unbounded`` or ``error``
    (numerical trouble, iteration/time limits); non-optimal results carry the
    solver message and never raise here.
    """
    c, A, b, senses, lb, ub, flip, sign = _min_form(problem)
    ineq = senses != EQ
    options = {"primal_feasibility_tolerance": tol,
               "dual_feasibility_tolerance": tol,
               "presolve": True}
    if time_limit is not None:
        options["time_limit"] = time_limit
    if problem.n_vars == 0:
        return LpSolution("optimal", problem.objective_offset, problem=problem)
    res = linprog(
        c,
        A_ub=A[ineq] if ineq.any() else None,
        b_ub=b[ineq] if ineq.any() else None,
        A_eq=A[~ineq] if (~ineq).any() else None,
        b_eq=b[~ineq] if (~ineq).any() else None,
        bounds=np.column_stack([np.where(np.isfinite(lb), lb, -np.inf),
                                np.where(np.isfinite(ub), ub, np.inf)]),
        method=method,
        options=options,
    )
    status = _HIGHS_STATUS.get(res.status, "error")
    if status != "optimal" or res.x is None:
        logger.debug("LP %s: %s", problem.name, res.message)
        return LpSolution(status if status != "optimal" else "error",
                          message=res.message, problem=problem)
    y = np.zeros(problem.n_cons)
    if ineq.any():
        y[ineq] = -res.ineqlin.marginals
    if (~ineq).any():
        y[~ineq] = -res.eqlin.marginals
    x = np.asarray(res.x, dtype=float)
    report = check_kkt(problem, LpSolution("optimal", x=x, duals=y), x=x, duals=y)
    z = c + A.T @ y
    lower = np.where(np.isfinite(lb), np.maximum(z, 0.0), 0.0)
    upper = np.where(np.isfinite(ub), np.maximum(-z, 0.0), 0.0)
    raw = problem.arrays()[0] @ x + problem.objective_offset
    sol = LpSolution("optimal", float(raw), x, y, lower, upper, report,
                     res.message, problem)
    if report.max() > 1e3 * tol * (1.0 + abs(raw)):
        logger.warning("LP %s: large KKT residual %s", problem.name, report)
    return sol
