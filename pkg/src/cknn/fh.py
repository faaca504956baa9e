"""Fay-Herriot area-level baseline with Prasad-Rao MSE.

Direct per-area totals come from the expansion (domain) estimator over the
probability sample, with a synthetic variance substituted where an area is
too thin for a stable design variance. The linking model regresses the
direct totals on known area covariate counts; the variance ratio is fitted
by REML Fisher scoring (truncated at zero) with a Prasad-Rao moments
fallback, and prediction MSE uses the g1 + g2 + 2 g3 decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    AlignmentError,
    CollinearityError,
    ConvergenceError,
    DegenerateDesignError,
    DomainError,
)
from .frame import PopulationFrame

__all__ = [
    "FhInputs",
    "FhModel",
    "FhPrediction",
    "direct_estimates",
    "build_design_matrix",
    "fit_fh",
    "fh_predict_mse",
]

REML_MAX_ITER = 100
REML_TOL = 1e-8
# Relative diagonal drop in the pivoted QR of X that counts as rank loss.
RANK_TOL = 1e-10
# Floor applied to synthetic variances so V stays positive definite even
# in degenerate all-zero-response worlds.
VARIANCE_FLOOR_SCALE = 1e-12


@dataclass(frozen=True)
class FhInputs:
    """Area-level model inputs.

    `direct` holds the expansion-estimator totals, `var_direct` their
    (possibly floored) design variances, `x` the covariate count matrix.
    `floored` marks areas whose design variance was replaced by the
    synthetic one.
    """

    area: np.ndarray
    direct: np.ndarray
    var_direct: np.ndarray
    x: np.ndarray
    columns: tuple[str, ...]
    floored: np.ndarray
    n_sampled: np.ndarray


def build_design_matrix(
    frame: PopulationFrame, levels: list[np.ndarray] | None = None
) -> tuple[np.ndarray, tuple[str, ...], list[np.ndarray]]:
    """Area-by-covariate count matrix.

    Columns are the area population size followed by, for each feature,
    the per-level unit counts with the lowest observed level dropped as
    the reference. Passing `levels` pins the level sets (one sorted array
    per feature) so degraded frames produce columns comparable to the
    source frame they were degraded from.
    """
    m_areas = frame.n_areas
    area0 = frame.area_id - 1
    size = np.zeros(m_areas)
    np.add.at(size, area0, 1.0)
    cols = [size]
    names = ["size"]
    if levels is None:
        levels = [np.unique(frame.features[:, j]) for j in range(frame.p_max)]
    for j in range(frame.p_max):
        lvls = np.asarray(levels[j])
        for lvl in lvls[1:]:
            cnt = np.zeros(m_areas)
            np.add.at(cnt, area0[frame.features[:, j] == lvl], 1.0)
            cols.append(cnt)
            names.append(f"f{j + 1}_lvl{int(lvl) if float(lvl).is_integer() else lvl}")
    return np.column_stack(cols), tuple(names), levels


def direct_estimates(
    frame: PopulationFrame, covariate_frame: PopulationFrame | None = None
) -> FhInputs:
    """Expansion-estimator totals per area with design variances.

    The direct total for area m is (N / n) times the sample y total in the
    area, i.e. the domain estimator with u_i = y_i for units in m and 0
    otherwise; its variance is N^2 (1 - f) s_u^2 / n. Areas with fewer
    than two sampled units, or no within-area response spread, get a
    synthetic variance computed from national response moments instead.
    Covariates come from `covariate_frame` when given (it may have
    undercoverage) while totals always come from `frame`'s sample.
    """
    n = frame.n_sample
    big_n = frame.n_units
    if n < 2:
        raise DegenerateDesignError(f"need at least 2 sampled units, got {n}")
    f = n / big_n
    scale = big_n / n
    a_pos = frame.a_idx
    y_a = frame.y[a_pos]
    areas_a = frame.area_id[a_pos] - 1
    m_areas = frame.n_areas

    t_direct = np.zeros(m_areas)
    np.add.at(t_direct, areas_a, y_a)
    n_m = np.zeros(m_areas, dtype=np.int64)
    np.add.at(n_m, areas_a, 1)
    sum_y2 = np.zeros(m_areas)
    np.add.at(sum_y2, areas_a, y_a**2)
    t_direct *= scale

    # s_u^2 for the domain variable u = y * 1(area = m): the n - n_m zero
    # entries contribute through the mean only.
    mean_u = t_direct / big_n
    s_u2 = (sum_y2 - n * mean_u**2) / (n - 1)
    var_direct = big_n**2 * (1.0 - f) * s_u2 / n

    within_sums = t_direct / scale
    # Zero spread: every sampled y in the area equal (sum of squares test
    # works because it matches n_m * mean^2 exactly only then).
    within_var_zero = np.isclose(sum_y2 * n_m, within_sums**2, rtol=1e-12, atol=1e-12)
    floored = (n_m < 2) | within_var_zero | (var_direct <= 0.0)

    # Synthetic variance from national moments: treat u as y times an
    # area-membership indicator with probability P_m = N_m / N.
    pop_n_m = np.zeros(m_areas)
    np.add.at(pop_n_m, frame.area_id - 1, 1.0)
    p_m = pop_n_m / big_n
    ey = float(y_a.mean())
    ey2 = float((y_a**2).mean())
    var_u_synth = p_m * ey2 - (p_m * ey) ** 2
    synth = big_n**2 * (1.0 - f) * var_u_synth / n
    floor = VARIANCE_FLOOR_SCALE * scale**2
    synth = np.maximum(synth, floor)
    var_direct = np.where(floored, synth, var_direct)

    cov_frame = frame if covariate_frame is None else covariate_frame
    if cov_frame.n_areas != m_areas:
        raise AlignmentError("covariate frame has a different area count")
    x, names, _ = build_design_matrix(cov_frame)
    return FhInputs(
        area=np.arange(1, m_areas + 1),
        direct=t_direct,
        var_direct=var_direct,
        x=x,
        columns=names,
        floored=floored,
        n_sampled=n_m,
    )


@dataclass(frozen=True)
class FhFit:
    """Convergence record for the variance-component fit."""

    method: str
    iterations: int
    converged: bool
    used_fallback: bool
    trace: tuple[float, ...]


@dataclass(frozen=True)
class FhModel:
    beta: np.ndarray
    sigma2_u: float
    gamma: np.ndarray
    columns: tuple[str, ...]
    fit: FhFit


def _check_rank(x: np.ndarray, columns: tuple[str, ...]) -> None:
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise CollinearityError("design matrix is identically zero", list(columns))
    rank = int((diag > RANK_TOL * diag[0]).sum())
    if rank < x.shape[1]:
        dropped = [columns[j] for j in piv[rank:]]
        raise CollinearityError(
            f"design matrix is rank deficient (rank {rank} of {x.shape[1]})",
            sorted(dropped),
        )


def _gls_beta(x, y, v_tot):
    xtv = x.T / v_tot
    a = xtv @ x
    beta = scipy.linalg.solve(a, xtv @ y, assume_a="pos")
    return beta, a


def _moments_sigma2(x, y, v):
    """Prasad-Rao moments estimator of the linking variance."""
    m, p = x.shape
    q, _ = scipy.linalg.qr(x, mode="economic")
    resid = y - q @ (q.T @ y)
    h = (q**2).sum(axis=1)
    est = (float(resid @ resid) - float(v @ (1.0 - h))) / (m - p)
    return max(est, 0.0)


def fit_fh(
    inputs: FhInputs,
    var_method: str = "reml",
    max_iter: int = REML_MAX_ITER,
    tol: float = REML_TOL,
    moments_fallback: bool = True,
) -> FhModel:
    """Fit the linking model by REML scoring (or moments directly).

    The REML score for the linking variance is (y'P^2y - tr P) / 2 with
    expected information tr(P^2) / 2, P the usual REML projection. The
    iterate is truncated at zero; a negative score at zero is accepted as
    a boundary solution. Non-convergence raises unless `moments_fallback`
    is set, in which case the Prasad-Rao moments estimate is used and
    flagged.
    """
    x = np.asarray(inputs.x, dtype=float)
    y = np.asarray(inputs.direct, dtype=float)
    v = np.asarray(inputs.var_direct, dtype=float)
    m, p = x.shape
    if m <= p:
        raise DomainError(f"need more areas than covariates, got M={m}, p={p}")
    if (v < 0).any() or not np.isfinite(v).all():
        raise DomainError("direct variances must be non-negative and finite")
    _check_rank(x, inputs.columns)
    if var_method not in ("reml", "moments"):
        raise DomainError(f"unknown var_method {var_method!r}")

    def finish(sigma2, fit):
        v_tot = sigma2 + v
        if (v_tot <= 0.0).any():
            raise DegenerateDesignError(
                "zero total variance in some area: sigma2_u and the direct "
                "variance are both zero"
            )
        beta, _ = _gls_beta(x, y, v_tot)
        gamma = sigma2 / v_tot
        return FhModel(
            beta=beta,
            sigma2_u=float(sigma2),
            gamma=gamma,
            columns=inputs.columns,
            fit=fit,
        )

    if var_method == "moments":
        sigma2 = _moments_sigma2(x, y, v)
        return finish(
            sigma2,
            FhFit("moments", 0, True, False, (float(sigma2),)),
        )

    sigma2 = _moments_sigma2(x, y, v)
    trace = [float(sigma2)]
    converged = False
    failed = False
    for it in range(1, max_iter + 1):
        v_tot = sigma2 + v
        if (v_tot <= 0.0).any():
            failed = True
            break
        vinv = 1.0 / v_tot
        xtv = x.T * vinv
        a = xtv @ x
        try:
            ainv_xtv = scipy.linalg.solve(a, xtv, assume_a="pos")
        except scipy.linalg.LinAlgError:
            failed = True
            break
        # P = V^-1 - V^-1 X (X'V^-1X)^-1 X'V^-1, kept dense: M is small.
        pmat = np.diag(vinv) - xtv.T @ ainv_xtv
        py = pmat @ y
        score = 0.5 * (float(py @ (pmat @ py)) - float(np.trace(pmat)))
        info = 0.5 * float((pmat * pmat.T).sum())
        if not np.isfinite(score) or not np.isfinite(info) or info <= 0:
            failed = True
            break
        step = score / info
        new = max(sigma2 + step, 0.0)
        trace.append(float(new))
        if sigma2 == 0.0 and new == 0.0:
            converged = True
            break
        if abs(new - sigma2) <= tol * (1.0 + sigma2):
            sigma2 = new
            converged = True
            break
        sigma2 = new
    iterations = len(trace) - 1

    if converged and not failed:
        return finish(sigma2, FhFit("reml", iterations, True, False, tuple(trace)))
    if moments_fallback:
        sigma2 = _moments_sigma2(x, y, v)
        trace.append(float(sigma2))
        return finish(
            sigma2, FhFit("moments", iterations, True, True, tuple(trace))
        )
    raise ConvergenceError(
        f"REML scoring did not converge in {iterations} iterations", trace
    )


@dataclass(frozen=True)
class FhPrediction:
    """EBLUP totals and their Prasad-Rao MSE components."""

    t_fh: np.ndarray
    mse: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray

    @property
    def rtmse(self) -> np.ndarray:
        return np.sqrt(self.mse)


def fh_predict_mse(model: FhModel, inputs: FhInputs) -> FhPrediction:
    """EBLUP predictions with MSE = g1 + g2 + 2 g3.

    g1 is the shrinkage variance, g2 the regression-coefficient
    contribution, g3 the variance-component estimation contribution using
    the REML asymptotic variance 2 / sum((sigma_u^2 + v_l)^-2).
    """
    if inputs.columns != model.columns:
        raise AlignmentError("inputs were built with different design columns")
    x = np.asarray(inputs.x, dtype=float)
    y = np.asarray(inputs.direct, dtype=float)
    v = np.asarray(inputs.var_direct, dtype=float)
    sigma2 = model.sigma2_u
    v_tot = sigma2 + v
    if (v_tot <= 0.0).any():
        raise DegenerateDesignError(
            "zero total variance in some area: sigma2_u and the direct "
            "variance are both zero"
        )
    gamma = sigma2 / v_tot
    synth = x @ model.beta
    t_fh = gamma * y + (1.0 - gamma) * synth

    xtv = x.T / v_tot
    a = xtv @ x
    ainv_x = scipy.linalg.solve(a, x.T, assume_a="pos")
    g1 = gamma * v
    g2 = (1.0 - gamma) ** 2 * np.einsum("mp,pm->m", x, ainv_x)
    var_sigma2 = 2.0 / float((v_tot**-2).sum())
    g3 = v**2 / v_tot**3 * var_sigma2
    return FhPrediction(t_fh=t_fh, mse=g1 + g2 + 2.0 * g3, g1=g1, g2=g2, g3=g3)
