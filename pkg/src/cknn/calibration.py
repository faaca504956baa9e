"""Design-unbiased national total and calibrated donor-rank weights.

The national benchmark combines the big-data stratum total with a
sample-based estimate of the missed stratum. Donor-rank weights start at
the uniform 1/k and are shifted by the closed-form minimiser of the
chi-square distance sum_j k (w_j - 1/k)^2 subject to sum_j w_j = 1 and the
weighted rank totals hitting the benchmark. Weights may leave [0, 1]; that
is legal for calibration weights and is surfaced as a diagnostic rather
than an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDesignError, DomainError
from .frame import PopulationFrame
from .hasd import FeatureMask
from .imputer import ImputationResult, impute_all, rank_totals

__all__ = [
    "IntegratorEstimate",
    "CalibrationDiagnostics",
    "CalibrationResult",
    "HybridEstimate",
    "data_integrator",
    "calibration_weights",
    "small_area_totals",
    "calibrate_imputation",
    "hybrid_estimate",
]

# Relative floor under which the rank-total spread counts as degenerate.
DEGENERATE_SPREAD_TOL = 1e-9


@dataclass(frozen=True)
class IntegratorEstimate:
    """Design-unbiased national total and its building blocks.

    t_p = t_b + n_c * (weighted missed-stratum sample mean); t_b and t_d
    are the observed big-data and donor totals, n_c the missed-stratum
    count.
    """

    t_p: float
    t_b: float
    t_d: float
    n_c: int
    n_b: int
    ybar_c_hat: float


def data_integrator(frame: PopulationFrame) -> IntegratorEstimate:
    """Hybrid national estimator: big-data total plus weighted donor mean.

    Requires a non-empty donor set D with positive total design weight;
    an empty D leaves the missed stratum unestimable.
    """
    d_pos = frame.d_idx
    n_c = int(frame.n_units - frame.b_idx.size)
    if n_c == 0:
        # B = U: the whole population is observed and the sample term
        # vanishes, so the estimate is the exact census total.
        t_b = float(frame.y[frame.b_idx].sum())
        return IntegratorEstimate(
            t_p=t_b, t_b=t_b, t_d=0.0, n_c=0, n_b=int(frame.b_idx.size), ybar_c_hat=0.0
        )
    if d_pos.size == 0:
        raise DegenerateDesignError(
            "A intersect C is empty: the missed stratum has no donors"
        )
    weights = frame.design_weight[d_pos]
    den = float(weights.sum())
    if not np.isfinite(den) or den <= 0.0:
        raise DegenerateDesignError("total donor design weight must be positive")
    num = float((weights * frame.y[d_pos]).sum())
    ybar = num / den
    n_c = int(frame.n_units - frame.b_idx.size)
    t_b = float(frame.y[frame.b_idx].sum())
    t_d = float(frame.y[d_pos].sum())
    return IntegratorEstimate(
        t_p=t_b + n_c * ybar,
        t_b=t_b,
        t_d=t_d,
        n_c=n_c,
        n_b=int(frame.b_idx.size),
        ybar_c_hat=ybar,
    )


@dataclass(frozen=True)
class CalibrationDiagnostics:
    """Calibration health flags.

    fallback is True when the rank totals were too uniform to carry the
    benchmark constraint, in which case the weights stay uniform and
    `residual` records the unmet gap t_p - t_cknn.
    """

    fallback: bool
    residual: float
    weights_outside_unit_interval: bool


def calibration_weights(
    t_rank, t_p: float, t_b: float, t_d: float, k: int | None = None
) -> tuple[np.ndarray, CalibrationDiagnostics]:
    """Closed-form calibrated donor-rank weights.

    Solves min sum_j k (w_j - 1/k)^2 subject to sum_j w_j = 1 and
    t_b + t_d + sum_j w_j t_rank_j = t_p. When the rank totals are
    (numerically) all equal the constraint set degenerates; the weights
    then stay uniform and the residual is reported instead. `k` defaults
    to the number of rank totals and must match it when given.
    """
    t_rank = np.asarray(t_rank, dtype=float)
    if t_rank.ndim != 1 or t_rank.size < 1:
        raise DomainError("rank totals must be a non-empty 1-d array")
    if not np.isfinite(t_rank).all():
        raise DomainError("rank totals must be finite")
    if k is not None and k != t_rank.size:
        raise DomainError(f"k={k} does not match {t_rank.size} rank totals")
    k = t_rank.size
    s = float(t_rank.sum())
    gap = t_p - (t_b + t_d + s / k)
    # k * variance of the rank totals; zero iff all rank totals are equal.
    spread = float((t_rank**2).sum() - s * s / k)
    eps = DEGENERATE_SPREAD_TOL * max(1.0, s * s)
    if spread <= eps:
        w = np.full(k, 1.0 / k)
        residual = gap
        fallback = abs(gap) > 1e-9 * max(1.0, abs(t_p))
        return w, CalibrationDiagnostics(
            fallback=fallback,
            residual=residual if fallback else 0.0,
            weights_outside_unit_interval=False,
        )
    w = 1.0 / k + (t_rank - s / k) * (gap / spread)
    outside = bool(((w < 0.0) | (w > 1.0)).any())
    return w, CalibrationDiagnostics(
        fallback=False, residual=0.0, weights_outside_unit_interval=outside
    )


def small_area_totals(frame: PopulationFrame, y_hat: np.ndarray) -> np.ndarray:
    """Per-area totals T_hat_m = T_Bm + T_Dm + imputed C_m minus D_m mass.

    `y_hat` is the frame-length array from an ImputationResult: observed y
    over B is taken from the frame, everything in C from y_hat.
    """
    y_hat = np.asarray(y_hat, dtype=float)
    if y_hat.shape != (frame.n_units,):
        raise DomainError("y_hat must be frame-length")
    contrib = np.where(frame.delta, frame.y, y_hat)
    if not np.isfinite(contrib).all():
        raise DomainError("y_hat must be finite on every unit of C")
    totals = np.zeros(frame.n_areas)
    np.add.at(totals, frame.area_id - 1, contrib)
    return totals


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated weights plus the totals they reproduce."""

    w: np.ndarray
    t_rank: np.ndarray
    t_knn: float
    t_cknn: float
    per_area: np.ndarray
    integrator: IntegratorEstimate
    diagnostics: CalibrationDiagnostics


def calibrate_imputation(
    frame: PopulationFrame,
    imputation: ImputationResult,
    integrator: IntegratorEstimate | None = None,
) -> tuple[CalibrationResult, ImputationResult]:
    """Calibrate an imputation to the design-unbiased national total.

    Returns the calibration summary and the reweighted imputation (same
    neighbour sets, calibrated weights).
    """
    integ = data_integrator(frame) if integrator is None else integrator
    t_rank = rank_totals(imputation)
    t_knn = integ.t_b + integ.t_d + float(t_rank.mean()) if t_rank.size else integ.t_b + integ.t_d
    w, diag = calibration_weights(t_rank, integ.t_p, integ.t_b, integ.t_d)
    reweighted = imputation.with_weights(w)
    per_area = small_area_totals(frame, reweighted.y_hat)
    t_cknn = integ.t_b + integ.t_d + float(t_rank @ w)
    result = CalibrationResult(
        w=w,
        t_rank=t_rank,
        t_knn=t_knn,
        t_cknn=t_cknn,
        per_area=per_area,
        integrator=integ,
        diagnostics=diag,
    )
    return result, reweighted


@dataclass(frozen=True)
class HybridEstimate:
    """End-to-end calibrated kNN estimate for one frame."""

    k: int
    mask: FeatureMask
    calibration: CalibrationResult
    imputation: ImputationResult

    @property
    def per_area(self) -> np.ndarray:
        return self.calibration.per_area

    @property
    def t_p(self) -> float:
        return self.calibration.integrator.t_p


def hybrid_estimate(
    frame: PopulationFrame,
    k: int,
    mask: FeatureMask,
    n_threads: int = 1,
) -> HybridEstimate:
    """Impute, calibrate, and aggregate in one pass."""
    imputation = impute_all(frame, k, mask, n_threads=n_threads)
    calibration, reweighted = calibrate_imputation(frame, imputation)
    return HybridEstimate(
        k=k, mask=mask, calibration=calibration, imputation=reweighted
    )
