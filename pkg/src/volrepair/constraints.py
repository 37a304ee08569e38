"""Linear systems for martingale measures and the static-arbitrage detector.

The martingale set on the path space is {mu >= 0, A mu = b} with one mass
row, one centering row, and one zero-mean increment row per conditioning
prefix; calibration appends one row per pinned price. The detector combines
fast necessary smile/calendar checks with a complete LP feasibility test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lp
from .errors import DegenerateCalibrationError, DuplicateConstraintError, RankError
from .grid import (
    CalibrationTarget,
    DEFAULT_KMAX_MARGIN,
    PathIndexer,
    Theta,
    build_theta,
    choose_kmax,
)
from .market_data import NormalizedSurface
from .signed_measure import SignedMarginal

RANK_TOL = 1e-10


@dataclass(frozen=True)
class ConstraintSystem:
    """Equality system A mu = b over the path space, with per-row tags."""

    A: np.ndarray
    b: np.ndarray
    row_kinds: tuple[tuple, ...]
    theta: Theta
    m: int

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)
        if a.shape[0] != b.size or a.shape[0] != len(self.row_kinds):
            raise ValueError("row count mismatch between A, b and row_kinds")
        norms = np.max(np.abs(a), axis=1) if a.shape[0] else np.array([])
        if a.shape[0] and norms.min() == 0.0:
            raise ValueError("constraint system contains a zero row")

    @property
    def n_rows(self) -> int:
        return int(self.A.shape[0])

    @property
    def n_paths(self) -> int:
        return int(self.A.shape[1])


@dataclass(frozen=True)
class Violation:
    kind: str  # monotonicity | convexity | calendar | bounds | lp_infeasible
    location: tuple
    magnitude: float


@dataclass(frozen=True)
class ArbitrageReport:
    feasible: bool
    violations: tuple[Violation, ...] = ()
    lp_checked: bool = False

    def to_json_dict(self, surface: NormalizedSurface | None = None) -> dict:
        rows = []
        for v in self.violations:
            entry = {
                "kind": v.kind,
                "location": list(np.ravel(np.asarray(v.location, dtype=object))),
                "magnitude": v.magnitude,
            }
            if surface is not None and v.kind in (
                "bounds",
                "monotonicity",
                "convexity",
            ):
                i = v.location[0]
                f = surface.forwards[i]
                entry["original_units"] = {
                    "maturity_years": surface.maturities[i],
                    "strikes": [float(k) * f for k in np.atleast_1d(v.location[1])],
                }
            rows.append(entry)
        return {
            "feasible": self.feasible,
            "lp_checked": self.lp_checked,
            "violations": rows,
        }


def build_martingale_system(theta: Theta, m: int) -> ConstraintSystem:
    """Mass, centering and per-prefix zero-mean-increment rows."""
    if m < 1:
        raise ValueError("need at least one period")
    l = theta.l  # noqa: E741
    indexer = PathIndexer(l, m)
    n = indexer.n_paths
    idx = indexer.all_components()
    k = theta.strikes

    n_mart = (n - l) // (l - 1) if l > 1 else 0
    rows = 2 + n_mart
    a = np.zeros((rows, n))
    b = np.zeros(rows)
    kinds: list[tuple] = [("mass",), ("centering",)]
    a[0] = 1.0
    b[0] = 1.0
    a[1] = k[idx[:, 0]]
    b[1] = 1.0
    offset = 2
    for level in range(1, m):
        prefix_id = np.zeros(n, dtype=int)
        for t in range(level):
            prefix_id = prefix_id * l + idx[:, t]
        coeff = k[idx[:, level]] - k[idx[:, level - 1]]
        a[offset + prefix_id, np.arange(n)] = coeff
        for pid in range(l**level):
            rem, digits = pid, []
            for _ in range(level):
                digits.append(rem % l + 1)
                rem //= l
            kinds.append(("martingality", level, tuple(reversed(digits))))
        offset += l**level
    return ConstraintSystem(A=a, b=b, row_kinds=tuple(kinds), theta=theta, m=m)


def build_calibrated_system(
    base: ConstraintSystem, calibration: list[CalibrationTarget], theta: Theta
) -> ConstraintSystem:
    """Append one (k_path_i - strike)+ pricing row per calibrated node."""
    if not calibration:
        return base
    seen = set()
    for i, strike, _ in calibration:
        key = (i, round(float(strike), 15))
        if key in seen:
            raise DuplicateConstraintError(f"calibration node {key} supplied twice")
        seen.add(key)
    indexer = PathIndexer(theta.l, base.m)
    idx = indexer.all_components()
    k = theta.strikes
    new_rows, new_b, new_kinds = [], [], []
    for i, strike, price in calibration:
        if not 0 <= i < base.m:
            raise IndexError(f"maturity index {i} outside [0, {base.m})")
        new_rows.append(np.maximum(k[idx[:, i]] - float(strike), 0.0))
        new_b.append(float(price))
        new_kinds.append(("calibration", i, float(strike)))
    return ConstraintSystem(
        A=np.vstack([base.A, np.array(new_rows)]),
        b=np.concatenate([base.b, np.array(new_b)]),
        row_kinds=base.row_kinds + tuple(new_kinds),
        theta=theta,
        m=base.m,
    )


def _independent_rows(a: np.ndarray, tol: float = RANK_TOL) -> list[int]:
    """First maximal independent row subset by modified Gram-Schmidt."""
    kept: list[int] = []
    basis: list[np.ndarray] = []
    for r in range(a.shape[0]):
        v = a[r].astype(float)
        norm0 = np.linalg.norm(v)
        for _ in range(2):  # re-orthogonalize for stability
            for q in basis:
                v = v - (q @ v) * q
        if np.linalg.norm(v) > tol * max(1.0, norm0):
            basis.append(v / np.linalg.norm(v))
            kept.append(r)
    return kept


def build_joint_system(
    base: ConstraintSystem, marginals: list[SignedMarginal]
) -> ConstraintSystem:
    """Martingality plus marginal-fixing rows, reduced to full row rank.

    Mass and centering rows are dropped (implied by the marginal rows since
    each signed marginal has unit mass and unit mean); remaining dependent
    rows are removed numerically, keeping the first independent subset.
    """
    theta, m = base.theta, base.m
    l = theta.l  # noqa: E741
    if len(marginals) != m:
        raise ValueError(f"expected {m} marginals, got {len(marginals)}")
    indexer = PathIndexer(l, m)
    idx = indexer.all_components()
    mart = [r for r, kind in enumerate(base.row_kinds) if kind[0] == "martingality"]
    rows = [base.A[r] for r in mart]
    rhs = [base.b[r] for r in mart]
    kinds = [base.row_kinds[r] for r in mart]
    for i, marg in enumerate(marginals):
        for p_i in range(l):
            rows.append((idx[:, i] == p_i).astype(float))
            rhs.append(float(marg.weights[p_i]))
            kinds.append(("marginal", i + 1, p_i + 1))
    a = np.array(rows)
    b = np.array(rhs)
    kept = _independent_rows(a)
    system = ConstraintSystem(
        A=a[kept],
        b=b[kept],
        row_kinds=tuple(kinds[r] for r in kept),
        theta=theta,
        m=m,
    )
    if np.linalg.matrix_rank(system.A, tol=RANK_TOL) != system.n_rows:
        raise RankError("joint system reduction failed to reach full row rank")
    return system


def _smile_violations(surface: NormalizedSurface, tol: float) -> list[Violation]:
    out = []
    for i in range(surface.n_maturities):
        ks = np.concatenate([[0.0], surface.strikes[i]])
        cs = np.concatenate([[1.0], surface.prices[i]])
        for j in range(1, ks.size):
            k, c = ks[j], cs[j]
            lower = max(1.0 - k, 0.0)
            if c < lower - tol:
                out.append(Violation("bounds", (i, k), float(lower - c)))
            if c > 1.0 + tol:
                out.append(Violation("bounds", (i, k), float(c - 1.0)))
        dc = np.diff(cs)
        dk = np.diff(ks)
        for j in range(dc.size):
            if dc[j] > tol:
                out.append(
                    Violation("monotonicity", (i, (ks[j], ks[j + 1])), float(dc[j]))
                )
            if -dc[j] - dk[j] > tol:
                out.append(
                    Violation("bounds", (i, (ks[j], ks[j + 1])), float(-dc[j] - dk[j]))
                )
        slopes = dc / dk
        butterfly = np.diff(slopes)
        for j in range(butterfly.size):
            if butterfly[j] < -tol:
                out.append(
                    Violation("convexity", (i, ks[j + 1]), float(-butterfly[j]))
                )
    return out


def _calendar_violations(surface: NormalizedSurface, tol: float) -> list[Violation]:
    out = []
    for i in range(surface.n_maturities - 1):
        ks_next = np.concatenate([[0.0], surface.strikes[i + 1]])
        cs_next = np.concatenate([[1.0], surface.prices[i + 1]])
        top = float(surface.strikes[i + 1][-1])
        for k, c in zip(surface.strikes[i], surface.prices[i]):
            if k > top:  # avoid extrapolating the later smile
                continue
            later = float(np.interp(k, ks_next, cs_next))
            if c - later > tol:
                out.append(Violation("calendar", ((i, i + 1), float(k)), float(c - later)))
    return out


def all_node_targets(surface: NormalizedSurface) -> list[CalibrationTarget]:
    return [
        (i, float(k), float(c))
        for i in range(surface.n_maturities)
        for k, c in zip(surface.strikes[i], surface.prices[i])
    ]


def martingale_feasible(
    surface: NormalizedSurface,
    kmax_margin: float = DEFAULT_KMAX_MARGIN,
) -> tuple[bool, float]:
    """Complete check: does a martingale on the path space match all quotes?"""
    targets = all_node_targets(surface)
    try:
        k_max = choose_kmax(surface, targets, margin=kmax_margin)
    except DegenerateCalibrationError:
        k_max = choose_kmax(surface, margin=kmax_margin)
    theta = build_theta(surface, k_max)
    base = build_martingale_system(theta, surface.n_maturities)
    system = build_calibrated_system(base, targets, theta)
    return lp.check_feasibility(system.A, system.b)


def detect_arbitrage(
    surface: NormalizedSurface,
    tol: float = 1e-8,
    kmax_margin: float = DEFAULT_KMAX_MARGIN,
) -> ArbitrageReport:
    """Two-stage detector: necessary smile/calendar checks, then the LP."""
    violations = _smile_violations(surface, tol) + _calendar_violations(surface, tol)
    if violations:
        return ArbitrageReport(feasible=False, violations=tuple(violations))
    feasible, infeas = martingale_feasible(surface, kmax_margin)
    if not feasible:
        violations.append(Violation("lp_infeasible", ("surface",), float(infeas)))
    return ArbitrageReport(
        feasible=not violations, violations=tuple(violations), lp_checked=True
    )
