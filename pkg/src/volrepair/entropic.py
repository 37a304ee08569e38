"""Entropically regularized projection onto the martingale constraint set.

The regularized coupling is a diagonal scaling of the Gibbs kernel: one
positive vector per constraint block (affine rows of the martingale system,
the box constraint from the negative part, and the fixed column marginal).
Each sweep updates the scalings in turn; affine substeps reduce to finding
the root of an explicit monotone scalar function. The full-matrix Dykstra
recursion is kept as a reference implementation for testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainViolationError, InstabilityError
from .signed_measure import JointSignedMeasure

SAFE_EXPONENT = 700.0
ROOT_TOL = 1e-12
DEFAULT_E_TOL = 1e-4
DEFAULT_MAX_ITERS = 100_000


@dataclass(frozen=True)
class GibbsKernel:
    """Entrywise exp(-D/epsilon), strictly positive by construction."""

    G: np.ndarray
    epsilon: float
    floored_entries: int = 0


@dataclass
class ScalingState:
    """The R positive scaling vectors plus where the iteration stopped."""

    scalings: list[np.ndarray]
    iteration: int = 0
    substep: int = 0
    criterion_history: list[float] = field(default_factory=list)

    @property
    def n_blocks(self) -> int:
        return len(self.scalings)


@dataclass
class SinkhornReport:
    converged: bool
    iterations: int
    final_criterion: float
    history: list[dict] = field(default_factory=list)
    primal_kl: float | None = None
    duality_gap: float | None = None


@dataclass(frozen=True)
class SweepEntry:
    epsilon: float
    cost: float | None
    final_criterion: float | None
    converged: bool
    error: str | None = None


def gibbs_kernel(dist: np.ndarray, epsilon: float) -> GibbsKernel:
    """Kernel exp(-D/eps); underflowed entries are floored, not zeroed."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    g = np.exp(-np.asarray(dist, dtype=float) / epsilon)
    tiny = np.finfo(float).tiny
    floored = int(np.count_nonzero(g < tiny))
    if floored:
        g = np.maximum(g, tiny)
    return GibbsKernel(G=g, epsilon=float(epsilon), floored_entries=floored)


def entropy(m: np.ndarray) -> float:
    """H(M) = -sum M (log M - 1) with the 0 log 0 = 0 convention."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        return -np.inf
    terms = np.zeros_like(m)
    pos = m > 0
    terms[pos] = m[pos] * (np.log(m[pos]) - 1.0)
    return float(-terms.sum())


def kl_divergence(m: np.ndarray, g: np.ndarray) -> float:
    """Relative entropy KL(M | G); +inf if M has a negative entry."""
    m = np.asarray(m, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(m < 0):
        return float("inf")
    out = np.array(g, dtype=float, copy=True)  # M = 0 entries contribute G
    pos = m > 0
    out[pos] = m[pos] * np.log(m[pos] / g[pos]) - m[pos] + g[pos]
    return float(out.sum())


def root_find(
    coeffs: np.ndarray, x: np.ndarray, rhs: float, label=None, x0: float | None = None
) -> float:
    """Root of lam -> <exp(lam c), c * x> - rhs for nonzero c and x > 0.

    The map is strictly increasing, so every evaluation pins the root to one
    side; safeguarded Newton steps (falling back to bisection once a bracket
    exists, geometric jumps before that) converge from any start. ``x0``
    warm-starts the search, typically from the previous sweep's root.
    Exponent arguments are capped for safety.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    x = np.asarray(x, dtype=float)
    cx = coeffs * x
    c2x = coeffs * cx
    amax = float(np.max(np.abs(coeffs)))
    if amax == 0.0:
        raise ValueError("root_find needs a nonzero row")
    safe_lam = SAFE_EXPONENT / amax

    def g_pair(lam: float) -> tuple[float, float]:
        e = np.exp(lam * coeffs)
        return float(e @ cx) - rhs, float(e @ c2x)

    tol_abs = ROOT_TOL * max(1.0, abs(rhs))
    lam = 0.0
    if x0 is not None and np.isfinite(x0) and abs(x0) < safe_lam:
        lam = float(x0)
    lo, hi = -np.inf, np.inf
    stride = 1.0
    width_prev = np.inf
    val, gp = g_pair(lam)
    for _ in range(200):
        if abs(val) <= tol_abs:
            break
        if val > 0:
            hi = lam
        else:
            lo = lam
        if np.isfinite(lo) and np.isfinite(hi) and hi - lo <= 1e-15 * max(
            1.0, abs(lo), abs(hi)
        ):
            # bracket exhausted: the root is resolved to float precision even
            # if cancellation noise keeps |g| above the absolute tolerance
            break
        newton = lam - val / gp if gp > 0 and np.isfinite(val) else None
        if np.isfinite(lo) and np.isfinite(hi):
            width = hi - lo
            # Newton may crawl from the flat side of the exponential; force a
            # bisection whenever the last step failed to halve the bracket
            allow_newton = width <= 0.5 * width_prev
            width_prev = width
            cand = (
                newton
                if allow_newton and newton is not None and lo < newton < hi
                else 0.5 * (lo + hi)
            )
        else:
            # no bracket yet: jump geometrically, but let Newton overtake
            jump = lam - stride if val > 0 else lam + stride
            stride *= 4.0
            if newton is not None:
                cand = min(newton, jump) if val > 0 else max(newton, jump)
            else:
                cand = jump
            if abs(cand) > safe_lam:
                raise InstabilityError(
                    label, "bracket expansion exceeded safe exponent"
                )
        lam = cand
        val, gp = g_pair(lam)
    else:
        raise ArithmeticError(f"root_find failed to converge (rhs={rhs})")
    # polish: a few extra Newton steps while they strictly help
    best, best_g, best_gp = lam, val, gp
    for _ in range(3):
        if abs(best_g) <= 1e-3 * tol_abs or best_gp <= 0:
            break
        cand = best - best_g / best_gp
        cand_g, cand_gp = g_pair(cand)
        if not np.isfinite(cand_g) or abs(cand_g) >= abs(best_g):
            break
        best, best_g, best_gp = cand, cand_g, cand_gp
    return best


def _affine_rows(system) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    rows = []
    for r in range(system.n_rows):
        support = np.nonzero(system.A[r])[0]
        rows.append((support, system.A[r][support]))
    return rows, system.A


def _shifted_rhs(system, nu: JointSignedMeasure) -> np.ndarray:
    return system.b + system.A @ nu.nu_minus


def prox_vector(
    r: int, x: np.ndarray, system, nu: JointSignedMeasure
) -> np.ndarray:
    """KL-closest point of the r-th constraint set to a positive vector.

    ``r`` is 1-based: affine rows first, then the box constraint, then the
    fixed column marginal (which ignores x entirely).
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("prox input must be strictly positive")
    n_aff = system.n_rows
    if not 1 <= r <= n_aff + 2:
        raise IndexError(f"substep {r} outside [1, {n_aff + 2}]")
    if r <= n_aff:
        support = np.nonzero(system.A[r - 1])[0]
        rhs = float(_shifted_rhs(system, nu)[r - 1])
        lam = root_find(system.A[r - 1][support], x[support], rhs, label=r)
        return x * np.exp(lam * system.A[r - 1])
    if r == n_aff + 1:
        return np.maximum(x, nu.nu_minus)
    return nu.nu_plus.copy()


def stopping_criterion(m: np.ndarray, system, nu: JointSignedMeasure) -> float:
    """Max sup-norm violation of affine, box and column-marginal constraints."""
    row = m.sum(axis=1)
    col = m.sum(axis=0)
    affine = float(np.max(np.abs(system.A @ (row - nu.nu_minus) - system.b)))
    box = float(np.max(np.maximum(nu.nu_minus - row, 0.0)))
    fixed = float(np.max(np.abs(col - nu.nu_plus)))
    return max(affine, box, fixed)


def reconstruct_coupling(kernel: GibbsKernel, state: ScalingState) -> np.ndarray:
    """diag(product of row scalings) G diag(column scaling)."""
    rho = np.ones_like(state.scalings[0])
    for a in state.scalings[:-1]:
        rho = rho * a
    return (rho[:, None] * kernel.G) * state.scalings[-1][None, :]


def _check_finite_positive(vec: np.ndarray, substep: int, what: str):
    low = float(vec.min())
    high = float(vec.max())
    if not (low > 0.0) or not np.isfinite(high):
        raise InstabilityError(substep, f"{what} left the positive range")


def sinkhorn_run(
    kernel: GibbsKernel,
    system,
    nu: JointSignedMeasure,
    e_tol: float = DEFAULT_E_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    initial_scalings: list[np.ndarray] | None = None,
    track_objectives: bool = True,
    objective_every: int = 1,
) -> tuple[np.ndarray, ScalingState, SinkhornReport]:
    """Multi-constrained scaling iteration until the criterion drops below e_tol.

    Never materializes couplings during substeps: each sweep costs two
    kernel matrix-vector products plus one scalar root-find per affine row.
    The returned coupling is the one whose criterion met the tolerance,
    together with the scalings that reproduce it. Objective columns in the
    history are filled every ``objective_every`` sweeps (they need a dense
    reconstruction, unlike the criterion itself).
    """
    g = kernel.G
    n = g.shape[0]
    rows, _ = _affine_rows(system)
    rhs = _shifted_rhs(system, nu)
    n_aff = system.n_rows
    n_blocks = n_aff + 2

    if initial_scalings is not None:
        if len(initial_scalings) != n_blocks:
            raise ValueError("initial scalings block count mismatch")
        a = [np.array(v, dtype=float) for v in initial_scalings]
    else:
        a = [np.ones(n) for _ in range(n_blocks)]
    rho = np.ones(n)
    for v in a[:-1]:
        rho = rho * v
    g_acol = g @ a[-1]
    lam_cache: list[float | None] = [None] * n_aff

    history: list[dict] = []
    state = ScalingState(scalings=a, iteration=0, substep=n_blocks - 1)

    def criterion_from_marginals(row_marg, col_marg):
        affine = float(np.max(np.abs(system.A @ (row_marg - nu.nu_minus) - system.b)))
        box = float(np.max(np.maximum(nu.nu_minus - row_marg, 0.0)))
        fixed = float(np.max(np.abs(col_marg - nu.nu_plus)))
        return max(affine, box, fixed)

    def record(n_iter, crit, m=None, force=False):
        entry = {"n": n_iter, "substep": n_blocks - 1, "criterion": crit}
        if track_objectives and (force or n_iter % objective_every == 0):
            if m is None:
                m = (rho[:, None] * g) * a[-1][None, :]
            entry["primal_kl"] = kernel.epsilon * kl_divergence(m, g)
            entry["duality_gap"] = duality_gap(m, state, kernel, system, nu, m_rec=m)
        history.append(entry)
        state.criterion_history.append(crit)

    # convention: the (0, R-1) iterate is the raw kernel
    crit = criterion_from_marginals(g_acol * rho, g.T @ rho * a[-1])
    record(0, crit, m=(rho[:, None] * g) * a[-1][None, :])
    if crit < e_tol:
        m = (rho[:, None] * g) * a[-1][None, :]
        report = SinkhornReport(True, 0, crit, history)
        _finalize_report(report, m, state, kernel, system, nu, track_objectives)
        return m, state, report

    converged = False
    n_iter = 0
    while n_iter < max_iters:
        n_iter += 1
        for r in range(n_aff):
            y = (rho / a[r]) * g_acol
            _check_finite_positive(y, r + 1, "scaled kernel image")
            support, coef = rows[r]
            lam = root_find(
                coef, y[support], float(rhs[r]), label=r + 1, x0=lam_cache[r]
            )
            lam_cache[r] = lam
            new = np.exp(lam * system.A[r])
            rho = rho * (new / a[r])
            a[r] = new
            _check_finite_positive(rho, r + 1, "row scaling product")
        y = (rho / a[n_aff]) * g_acol
        _check_finite_positive(y, n_aff + 1, "scaled kernel image")
        new = np.maximum(nu.nu_minus / y, 1.0)
        rho = rho * (new / a[n_aff])
        a[n_aff] = new
        _check_finite_positive(rho, n_aff + 1, "row scaling product")

        row_marg = rho * g_acol
        gt_rho = g.T @ rho
        col_marg = a[-1] * gt_rho
        crit = criterion_from_marginals(row_marg, col_marg)
        state.iteration = n_iter
        record(n_iter, crit)
        if crit < e_tol:
            converged = True
            break
        if n_iter == max_iters:
            break
        a[-1] = nu.nu_plus / gt_rho
        _check_finite_positive(a[-1], n_blocks, "column scaling")
        g_acol = g @ a[-1]

    m = (rho[:, None] * g) * a[-1][None, :]
    report = SinkhornReport(converged, n_iter, crit, history)
    _finalize_report(report, m, state, kernel, system, nu, track_objectives)
    return m, state, report


def _finalize_report(report, m, state, kernel, system, nu, track_objectives):
    if track_objectives:
        report.primal_kl = kernel.epsilon * kl_divergence(m, kernel.G)
        report.duality_gap = duality_gap(m, state, kernel, system, nu)


def sinkhorn_iterates(
    kernel: GibbsKernel, system, nu: JointSignedMeasure, sweeps: int
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
    """Dense couplings M(n, r) for every substep of a fixed number of sweeps.

    Test helper mirroring the Dykstra reference; also returns the scaling
    vectors after each sweep.
    """
    g = kernel.G
    n = g.shape[0]
    rows, _ = _affine_rows(system)
    rhs = _shifted_rhs(system, nu)
    n_aff = system.n_rows
    n_blocks = n_aff + 2
    a = [np.ones(n) for _ in range(n_blocks)]
    rho = np.ones(n)
    g_acol = g @ a[-1]
    lam_cache: list[float | None] = [None] * n_aff
    couplings: list[list[np.ndarray]] = []
    scalings: list[list[np.ndarray]] = []
    for _ in range(sweeps):
        per_sweep = []
        for r in range(n_aff):
            y = (rho / a[r]) * g_acol
            support, coef = rows[r]
            lam = root_find(
                coef, y[support], float(rhs[r]), label=r + 1, x0=lam_cache[r]
            )
            lam_cache[r] = lam
            new = np.exp(lam * system.A[r])
            rho = rho * (new / a[r])
            a[r] = new
            per_sweep.append((rho[:, None] * g) * a[-1][None, :])
        y = (rho / a[n_aff]) * g_acol
        new = np.maximum(nu.nu_minus / y, 1.0)
        rho = rho * (new / a[n_aff])
        a[n_aff] = new
        per_sweep.append((rho[:, None] * g) * a[-1][None, :])
        a[-1] = nu.nu_plus / (g.T @ rho)
        g_acol = g @ a[-1]
        per_sweep.append((rho[:, None] * g) * a[-1][None, :])
        couplings.append(per_sweep)
        scalings.append([v.copy() for v in a])
    return couplings, scalings


def dykstra_run(
    kernel: GibbsKernel, system, nu: JointSignedMeasure, sweeps: int
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
    """Full-matrix Dykstra reference: X(n, r) and the q correction matrices."""
    g = kernel.G
    rows, _ = _affine_rows(system)
    rhs = _shifted_rhs(system, nu)
    n_aff = system.n_rows
    n_blocks = n_aff + 2
    x = g.copy()
    q = [np.ones_like(g) for _ in range(n_blocks)]
    lam_cache: list[float | None] = [None] * n_aff
    couplings: list[list[np.ndarray]] = []
    q_history: list[list[np.ndarray]] = []
    for _ in range(sweeps):
        per_sweep = []
        for r in range(n_blocks):
            x_prev = x
            v = x_prev * q[r]
            if r < n_aff:
                support, coef = rows[r]
                vrow = v.sum(axis=1)
                lam = root_find(
                    coef, vrow[support], float(rhs[r]), label=r + 1, x0=lam_cache[r]
                )
                lam_cache[r] = lam
                x = np.exp(lam * system.A[r])[:, None] * v
            elif r == n_aff:
                scale = np.maximum(nu.nu_minus / v.sum(axis=1), 1.0)
                x = scale[:, None] * v
            else:
                scale = nu.nu_plus / v.sum(axis=0)
                x = v * scale[None, :]
            q[r] = q[r] * x_prev / x
            per_sweep.append(x.copy())
        couplings.append(per_sweep)
        q_history.append([qq.copy() for qq in q])
    return couplings, q_history


def duality_gap(
    m: np.ndarray,
    state: ScalingState,
    kernel: GibbsKernel,
    system,
    nu: JointSignedMeasure,
    m_rec: np.ndarray | None = None,
) -> float:
    """Primal regularized objective minus the dual value at the current scalings.

    The conjugate terms have closed forms: affine rows contribute their
    multiplier times the shifted right-hand side, the box row pairs with the
    negative part (its dual variable must stay nonnegative), the fixed row
    pairs with the positive part. ``m_rec`` lets callers that already built
    the scaling reconstruction skip rebuilding it.
    """
    eps = kernel.epsilon
    rhs = _shifted_rhs(system, nu)
    n_aff = system.n_rows
    dual = 0.0
    for r in range(n_aff):
        support = np.nonzero(system.A[r])[0]
        coef = system.A[r][support]
        log_a = np.log(state.scalings[r][support])
        lam = float((coef @ log_a) / (coef @ coef))
        dual += eps * lam * float(rhs[r])
    u_box = eps * np.log(state.scalings[n_aff])
    if np.any(u_box < -1e-10):
        raise DomainViolationError(
            f"box-row dual variable has negative component {u_box.min()}"
        )
    dual += float(u_box @ nu.nu_minus)
    u_col = eps * np.log(state.scalings[-1])
    dual += float(u_col @ nu.nu_plus)
    if m_rec is None:
        m_rec = reconstruct_coupling(kernel, state)
    dual -= eps * float(m_rec.sum() - kernel.G.sum())
    primal = eps * kl_divergence(m, kernel.G)
    return primal - dual


def epsilon_sweep(
    dist: np.ndarray,
    nu: JointSignedMeasure,
    system,
    eps_list: list[float],
    e_tol: float = DEFAULT_E_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> list[SweepEntry]:
    """Run the scaling solver along a decreasing epsilon schedule.

    Scalings warm-start from the previous successful epsilon; failures are
    recorded and the sweep continues.
    """
    eps_arr = [float(e) for e in eps_list]
    if not eps_arr or any(e <= 0 for e in eps_arr):
        raise ValueError("eps_list must be nonempty positive values")
    if any(b >= a for a, b in zip(eps_arr, eps_arr[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    entries: list[SweepEntry] = []
    warm: list[np.ndarray] | None = None
    for eps in eps_arr:
        kernel = gibbs_kernel(dist, eps)
        try:
            m, state, report = sinkhorn_run(
                kernel,
                system,
                nu,
                e_tol=e_tol,
                max_iters=max_iters,
                initial_scalings=warm,
                track_objectives=False,
            )
        except InstabilityError as exc:
            entries.append(SweepEntry(eps, None, None, False, error=str(exc)))
            continue
        cost = float((m * dist).sum())
        entries.append(
            SweepEntry(eps, cost, report.final_criterion, report.converged)
        )
        if report.converged:
            warm = [v.copy() for v in state.scalings]
    return entries
