"""Exact small-scale solvers: dense simplex, coupling LP, KKT least squares.

The simplex here is a baseline and test oracle, not a production path: it is
deterministic (Bland's rule), dense, and capped in size. Larger instances
must go through the entropic solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    KmaxTooSmallError,
    ProblemTooLargeError,
    RankError,
    SingularSystemError,
)

DEFAULT_VAR_CAP = 5000
_RC_TOL = 1e-9  # reduced-cost / dual feasibility tolerance
_PIV_TOL = 1e-11  # smallest pivot magnitude accepted
_FEAS_TOL = 1e-9  # phase-1 objective below this counts as feasible


@dataclass(frozen=True)
class LpProblem:
    """min objective . x  s.t.  eq_matrix x = eq_rhs, x >= lower_bounds.

    Lower bounds may be -inf for free variables; no upper bounds.
    """

    objective: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    lower_bounds: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float)
        a = np.atleast_2d(np.asarray(self.eq_matrix, dtype=float))
        b = np.asarray(self.eq_rhs, dtype=float)
        lb = (
            np.zeros(c.size)
            if self.lower_bounds is None
            else np.asarray(self.lower_bounds, dtype=float)
        )
        if a.shape != (b.size, c.size) or lb.size != c.size:
            raise ValueError(
                f"inconsistent LP dimensions: A{a.shape}, b({b.size}), c({c.size})"
            )
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "eq_matrix", a)
        object.__setattr__(self, "eq_rhs", b)
        object.__setattr__(self, "lower_bounds", lb)

    @property
    def n_vars(self) -> int:
        return int(self.objective.size)


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None = None
    objective_value: float | None = None
    iterations: int = 0
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    infeasibility: float = 0.0
    extra: dict = field(default_factory=dict)


def _bland_simplex(c, a, b, basis, iter_cap=200_000):
    """Run simplex on standard form from a given feasible basis (in place).

    Returns (status, basis, x_basic, y, iterations); Bland's rule for both
    the entering and leaving choices prevents cycling.
    """
    m, n = a.shape
    in_basis = np.zeros(n, dtype=bool)
    in_basis[basis] = True
    iters = 0
    while True:
        bmat = a[:, basis]
        try:
            x_b = np.linalg.solve(bmat, b)
            y = np.linalg.solve(bmat.T, c[basis])
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("singular basis matrix in simplex") from exc
        reduced = c - a.T @ y
        eligible = ~in_basis & (reduced < -_RC_TOL)
        if not eligible.any():
            return "optimal", basis, x_b, y, iters
        entering = int(np.argmax(eligible))  # smallest eligible index (Bland)
        w = np.linalg.solve(bmat, a[:, entering])
        ratios = np.full(m, np.inf)
        mask = w > _PIV_TOL
        ratios[mask] = np.maximum(x_b[mask], 0.0) / w[mask]
        theta = ratios.min()
        if not np.isfinite(theta):
            return "unbounded", basis, x_b, y, iters
        # Bland: among (near-)minimal ratios, leave the smallest basic index
        tied = np.where(ratios <= theta * (1 + 1e-12) + 1e-300)[0]
        leaving_row = min(tied, key=lambda r: basis[r])
        in_basis[basis[leaving_row]] = False
        in_basis[entering] = True
        basis[leaving_row] = entering
        iters += 1
        if iters > iter_cap:
            raise ArithmeticError("simplex iteration cap exceeded")


def _solve_standard_form(c, a, b):
    """Two-phase simplex for min c.x s.t. a x = b, x >= 0."""
    a = a.copy()
    b = b.copy()
    m, n = a.shape
    flip = b < 0
    a[flip] *= -1
    b[flip] *= -1

    # phase 1: artificial identity basis
    a1 = np.hstack([a, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    status, basis, x_b, _, it1 = _bland_simplex(c1, a1, b, basis)
    if status != "optimal":
        raise ArithmeticError("phase 1 cannot be unbounded")
    infeas = float(c1[basis] @ x_b)
    if infeas > _FEAS_TOL:
        return LpSolution(status="infeasible", iterations=it1, infeasibility=infeas)

    # drive artificials out; an all-zero row among originals is redundant
    keep_rows = list(range(m))
    basis_set = set(basis)
    for row in range(m):
        if basis[row] < n:
            continue
        bmat = a1[:, basis]
        tab_row = np.linalg.solve(bmat, a)[row]
        candidates = np.where(np.abs(tab_row) > 1e-9)[0]
        pivot = next((int(j) for j in candidates if j not in basis_set), -1)
        if pivot >= 0:
            basis_set.discard(basis[row])
            basis_set.add(pivot)
            basis[row] = pivot
        else:
            keep_rows.remove(row)
    if len(keep_rows) < m:
        rows = np.array(keep_rows)
        a = a[rows]
        b = b[rows]
        basis = [basis[r] for r in keep_rows]
        m = len(keep_rows)
    else:
        rows = None

    status, basis, x_b, y, it2 = _bland_simplex(c, a, b, basis)
    iters = it1 + it2
    if status == "unbounded":
        return LpSolution(status="unbounded", iterations=iters)
    x = np.zeros(n)
    x[basis] = np.maximum(x_b, 0.0)
    reduced = c - a.T @ y
    return LpSolution(
        status="optimal",
        x=x,
        objective_value=float(c @ x),
        iterations=iters,
        duals=y,
        reduced_costs=reduced,
        extra={"kept_rows": rows},
    )


def solve_lp(problem: LpProblem, var_cap: int = DEFAULT_VAR_CAP) -> LpSolution:
    """Solve an LpProblem; free variables are split, finite bounds shifted."""
    if problem.n_vars > var_cap:
        raise ProblemTooLargeError(
            f"{problem.n_vars} variables exceed the exact-path cap {var_cap}; "
            "use the entropic solver"
        )
    c, a, b, lb = (
        problem.objective,
        problem.eq_matrix,
        problem.eq_rhs,
        problem.lower_bounds,
    )
    free = ~np.isfinite(lb)
    shift = np.where(free, 0.0, lb)
    b_eff = b - a @ shift
    if free.any():
        a_std = np.hstack([a, -a[:, free]])
        c_std = np.concatenate([c, -c[free]])
    else:
        a_std = a
        c_std = c
    sol = _solve_standard_form(c_std, a_std, b_eff)
    if sol.status != "optimal":
        return sol
    y = sol.x
    x = y[: problem.n_vars].copy()
    if free.any():
        x[free] -= y[problem.n_vars :]
    x += shift
    sol.x = x
    sol.objective_value = float(c @ x)
    sol.reduced_costs = sol.reduced_costs[: problem.n_vars]
    return sol


def check_feasibility(a: np.ndarray, b: np.ndarray) -> tuple[bool, float]:
    """Phase-1 test of {x >= 0 : a x = b}; returns (feasible, residual)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    sol = _solve_standard_form(np.zeros(a.shape[1]), a, b)
    if sol.status == "infeasible":
        return False, sol.infeasibility
    return True, 0.0


def solve_p_prime(
    dist: np.ndarray,
    nu_plus: np.ndarray,
    nu_minus: np.ndarray,
    a_sys: np.ndarray,
    b_sys: np.ndarray,
    var_cap: int = DEFAULT_VAR_CAP,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact coupling program: min <M, D> over M >= 0 with slack variables s.

    Constraints: M 1 - s = nu_minus, (a_sys) s = b_sys, M^T 1 = nu_plus,
    so s is the projected measure mu = M 1 - nu_minus >= 0. Returns
    (optimal coupling, mu, transport cost).
    """
    n = int(nu_plus.size)
    a_sys = np.atleast_2d(np.asarray(a_sys, dtype=float))
    n_rows = a_sys.shape[0]
    n_vars = n * n + n
    if n_vars > var_cap:
        raise ProblemTooLargeError(
            f"coupling LP needs {n_vars} variables (cap {var_cap}); "
            "use the entropic solver"
        )
    a = np.zeros((n + n_rows + n, n_vars))
    b = np.zeros(n + n_rows + n)
    for p in range(n):  # row sums minus slack
        a[p, p * n : (p + 1) * n] = 1.0
        a[p, n * n + p] = -1.0
        b[p] = nu_minus[p]
    a[n : n + n_rows, n * n :] = a_sys
    b[n : n + n_rows] = b_sys
    for q in range(n):  # column sums
        a[n + n_rows + q, q : n * n : n] = 1.0
        b[n + n_rows + q] = nu_plus[q]
    cost = np.concatenate([dist.reshape(-1), np.zeros(n)])
    sol = solve_lp(LpProblem(cost, a, b), var_cap=var_cap)
    if sol.status == "infeasible":
        raise KmaxTooSmallError(
            "coupling program infeasible; the grid upper bound was too small"
        )
    if sol.status != "optimal":
        raise ArithmeticError(f"unexpected LP status {sol.status}")
    coupling = sol.x[: n * n].reshape(n, n)
    mu = coupling.sum(axis=1) - nu_minus
    return coupling, mu, float(sol.objective_value)


def solve_eq_lsq(a: np.ndarray, b: np.ndarray, target: np.ndarray) -> np.ndarray:
    """min ||x - target||^2 s.t. a x = b via the symmetric KKT system."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    target = np.asarray(target, dtype=float)
    n_rows, n = a.shape
    kkt = np.zeros((n + n_rows, n + n_rows))
    kkt[:n, :n] = np.eye(n)
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([target, b])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("singular KKT system") from exc
    x = sol[:n]
    residual = float(np.max(np.abs(a @ x - b))) if n_rows else 0.0
    if residual > 1e-10 * max(1.0, float(np.max(np.abs(b))) if n_rows else 1.0):
        raise RankError(
            f"KKT solve left residual {residual}; constraint matrix likely rank deficient"
        )
    return x
