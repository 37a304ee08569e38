"""End-to-end arbitrage removal: detect, project, re-price, re-express.

The pipeline fixes the grid, builds the signed measure from the (possibly
stressed) prices, projects it onto the martingale set with either the exact
LP or the entropic scaling solver, and reads repaired prices back off the
projected marginals so the output is a bona fide model-consistent price set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import entropic, lp
from .constraints import (
    ConstraintSystem,
    build_calibrated_system,
    build_joint_system,
    build_martingale_system,
    detect_arbitrage,
    ArbitrageReport,
)
from .errors import InvalidCalibrationError
from .grid import (
    CalibrationTarget,
    DEFAULT_KMAX_MARGIN,
    Theta,
    build_theta,
    choose_kmax,
    distance_matrix,
)
from .market_data import NormalizedSurface, surface_vols
from .signed_measure import (
    DEFAULT_SHIFT,
    JointSignedMeasure,
    SignedMarginal,
    build_joint,
    marginal_weights,
)

MODES = ("lp_exact", "entropic")


@dataclass(frozen=True)
class RepairConfig:
    mode: str = "lp_exact"
    epsilon: float = 1.0
    e_tol: float = entropic.DEFAULT_E_TOL
    max_iters: int = entropic.DEFAULT_MAX_ITERS
    kmax_margin: float = DEFAULT_KMAX_MARGIN
    shift: float = DEFAULT_SHIFT
    calibration_marks: tuple[tuple[int, int], ...] = ()
    history_objectives_every: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "entropic" and not self.epsilon > 0:
            raise ValueError("entropic mode needs epsilon > 0")
        if not self.shift > 0:
            raise ValueError("shift must be > 0")


@dataclass
class ProjectionProblem:
    """Everything the solvers need, assembled once from a surface."""

    surface: NormalizedSurface
    theta: Theta
    m: int
    dist: np.ndarray
    marginals: list[SignedMarginal]
    nu: JointSignedMeasure
    base_system: ConstraintSystem
    system: ConstraintSystem
    calibration: list[CalibrationTarget]
    k_max: float


@dataclass
class RepairResult:
    mu: np.ndarray
    theta: Theta
    repaired_surface: NormalizedSurface
    transport_cost: float
    report_before: ArbitrageReport
    report_after: ArbitrageReport
    diagnostics: dict = field(default_factory=dict)
    problem: "ProjectionProblem | None" = None


def calibration_targets(
    surface: NormalizedSurface, marks: tuple[tuple[int, int], ...]
) -> list[CalibrationTarget]:
    targets = []
    for i, j in marks:
        k, c = surface.node(i, j)
        targets.append((i, k, c))
    return targets


def _marked_subsurface(
    surface: NormalizedSurface, targets: list[CalibrationTarget]
) -> NormalizedSurface:
    by_mat: dict[int, list[tuple[float, float]]] = {}
    for i, k, c in targets:
        by_mat.setdefault(i, []).append((k, c))
    mats, strikes, prices, fwds, dscs = [], [], [], [], []
    for i in sorted(by_mat):
        nodes = sorted(by_mat[i])
        mats.append(surface.maturities[i])
        strikes.append(np.array([k for k, _ in nodes]))
        prices.append(np.array([c for _, c in nodes]))
        fwds.append(surface.forwards[i])
        dscs.append(surface.discounts[i])
    return NormalizedSurface(
        tuple(mats), tuple(strikes), tuple(prices), tuple(fwds), tuple(dscs)
    )


def prepare_projection(
    surface: NormalizedSurface, config: RepairConfig
) -> ProjectionProblem:
    """Fix the grid, build marginals, the joint measure, and the system."""
    targets = calibration_targets(surface, config.calibration_marks)
    if targets:
        sub = _marked_subsurface(surface, targets)
        sub_report = detect_arbitrage(sub, kmax_margin=config.kmax_margin)
        if not sub_report.feasible:
            raise InvalidCalibrationError(
                "calibration sub-grid is arbitrageable: "
                + "; ".join(v.kind for v in sub_report.violations)
            )
    k_max = choose_kmax(surface, targets or None, margin=config.kmax_margin)
    theta = build_theta(surface, k_max)
    m = surface.n_maturities
    marginals = []
    for i in range(m):
        ks = np.concatenate([[0.0], surface.strikes[i], [theta.k_max]])
        cs = np.concatenate([[1.0], surface.prices[i], [0.0]])
        marginals.append(marginal_weights(ks, cs, theta))
    base = build_martingale_system(theta, m)
    joint_sys = build_joint_system(base, marginals)
    nu = build_joint(marginals, joint_sys, shift=config.shift)
    system = build_calibrated_system(base, targets, theta) if targets else base
    dist = distance_matrix(theta, m)
    return ProjectionProblem(
        surface=surface,
        theta=theta,
        m=m,
        dist=dist,
        marginals=marginals,
        nu=nu,
        base_system=base,
        system=system,
        calibration=targets,
        k_max=k_max,
    )


def extract_marginal(mu: np.ndarray, l: int, m: int, period: int) -> np.ndarray:  # noqa: E741
    """Sum the path-space measure over every index except the given period."""
    if not 1 <= period <= m:
        raise IndexError(f"period {period} outside [1, {m}]")
    tensor = np.asarray(mu, dtype=float).reshape((l,) * m)
    axes = tuple(ax for ax in range(m) if ax != period - 1)
    return tensor.sum(axis=axes) if axes else tensor


def price_from_marginal(weights: np.ndarray, strikes: np.ndarray, k: float) -> float:
    """Call price sum (x - k)+ under a discrete marginal on the grid."""
    return float(np.maximum(np.asarray(strikes) - k, 0.0) @ np.asarray(weights))


def _repriced_surface(
    surface: NormalizedSurface, theta: Theta, mu: np.ndarray, m: int
) -> NormalizedSurface:
    prices = []
    for i in range(m):
        marg = extract_marginal(mu, theta.l, m, i + 1)
        cs = np.array(
            [price_from_marginal(marg, theta.strikes, float(k)) for k in surface.strikes[i]]
        )
        prices.append(np.maximum(cs, 0.0))  # solver noise can leave -1e-13
    return replace(surface, prices=tuple(prices))


def repair(surface: NormalizedSurface, config: RepairConfig) -> RepairResult:
    """Project the surface's signed measure onto the martingale set."""
    report_before = detect_arbitrage(surface, kmax_margin=config.kmax_margin)
    problem = prepare_projection(surface, config)
    diagnostics: dict = {
        "mode": config.mode,
        "k_max": problem.k_max,
        "shift": config.shift,
        "alpha": problem.nu.alpha,
        "n_paths": problem.system.n_paths,
        "n_rows": problem.system.n_rows,
    }
    if config.mode == "lp_exact":
        coupling, mu, cost = lp.solve_p_prime(
            problem.dist,
            problem.nu.nu_plus,
            problem.nu.nu_minus,
            problem.system.A,
            problem.system.b,
        )
        diagnostics["w1_value"] = cost
    else:
        kernel = entropic.gibbs_kernel(problem.dist, config.epsilon)
        coupling, state, run_report = entropic.sinkhorn_run(
            kernel,
            problem.system,
            problem.nu,
            e_tol=config.e_tol,
            max_iters=config.max_iters,
            objective_every=config.history_objectives_every,
        )
        mu = coupling.sum(axis=1) - problem.nu.nu_minus
        cost = float((coupling * problem.dist).sum())
        diagnostics.update(
            {
                "epsilon": config.epsilon,
                "e_tol": config.e_tol,
                "converged": run_report.converged,
                "iterations": run_report.iterations,
                "final_criterion": run_report.final_criterion,
                "kl_value": run_report.primal_kl,
                "duality_gap": run_report.duality_gap,
                "history": run_report.history,
                "kernel_floored_entries": kernel.floored_entries,
            }
        )
    repaired = _repriced_surface(surface, problem.theta, mu, problem.m)
    report_after = detect_arbitrage(repaired, kmax_margin=config.kmax_margin)
    if problem.calibration:
        marg_cache = {
            i: extract_marginal(mu, problem.theta.l, problem.m, i + 1)
            for i in sorted({t[0] for t in problem.calibration})
        }
        diagnostics["marked_price_errors"] = [
            {
                "maturity_index": i,
                "k": k,
                "target": c,
                "error": abs(
                    price_from_marginal(marg_cache[i], problem.theta.strikes, k) - c
                ),
            }
            for i, k, c in problem.calibration
        ]
    diagnostics["price_changes_currency"] = _price_changes(surface, repaired)
    return RepairResult(
        mu=mu,
        theta=problem.theta,
        repaired_surface=repaired,
        transport_cost=cost,
        report_before=report_before,
        report_after=report_after,
        diagnostics=diagnostics,
        problem=problem,
    )


def _price_changes(before: NormalizedSurface, after: NormalizedSurface) -> list[dict]:
    rows = []
    for i, t in enumerate(before.maturities):
        scale = before.forwards[i] * before.discounts[i]
        for j, k in enumerate(before.strikes[i]):
            delta = float(after.prices[i][j] - before.prices[i][j]) * scale
            rows.append(
                {
                    "maturity_years": t,
                    "strike": float(k) * before.forwards[i],
                    "price_change": delta,
                }
            )
    return rows


def repaired_vol_table(result: RepairResult) -> tuple[np.ndarray, ...]:
    """Implied vols of the repaired surface; NaN where a price sits on a bound."""
    return surface_vols(result.repaired_surface)
