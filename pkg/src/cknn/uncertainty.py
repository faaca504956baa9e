"""Fixed-k bootstrap variance, leave-one-out bias, and per-area reporting.

The bootstrap resamples the probability sample A, not the population, and
never repeats the neighbour search: donor usage is frozen at its full
sample value, each sampled unit carries the pseudo-value y_i * K_km(i),
and a resample's total is just a sum of pseudo-values. Bias is estimated
from leave-one-out predictions over the donor set with the calibrated
weights held fixed.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .errors import AlignmentError, DomainError
from .frame import PopulationFrame
from .hasd import FeatureMask
from .imputer import DonorUsage, loo_impute

__all__ = [
    "PseudoValueSet",
    "BootstrapEstimate",
    "BiasEstimate",
    "SmallAreaReport",
    "pseudo_values",
    "fixed_k_bootstrap",
    "bootstrap_size",
    "achieved_cv",
    "pilot_cv",
    "estimate_bias",
    "assemble_report",
    "write_report_csv",
    "write_aggregates_json",
]

# Bootstrap-size rule constant: B = ceil((CV_CONSTANT / target_cv)^2).
BOOTSTRAP_CV_CONSTANT = 1.71
# Donor-set mass below which an area's bias ratio is too unstable and the
# pooled estimate is substituted.
POOLING_THRESHOLD = 5.0
NORMAL_CI_MULTIPLIER = 1.96
NOMINAL_COVERAGE = 0.95


@dataclass(frozen=True)
class PseudoValueSet:
    """Per-area pseudo-values over the probability sample A.

    z[m-1, r] = y * K_km for sampled unit r when it is a donor, 0 when the
    big data already covers it (its donor usage is identically zero).
    Resampling A and summing rows of z reproduces the imputed per-area
    mass without touching the neighbour sets.
    """

    z: np.ndarray
    a_unit_ids: np.ndarray

    @property
    def n_areas(self) -> int:
        return self.z.shape[0]

    @property
    def n_sample(self) -> int:
        return self.z.shape[1]


def pseudo_values(
    frame: PopulationFrame, usage: DonorUsage, w=None
) -> PseudoValueSet:
    """Expand donor usage into sample-aligned pseudo-values."""
    if w is not None:
        usage = usage.with_weights(w)
    if usage.counts.shape[0] != frame.n_areas:
        raise AlignmentError(
            "usage has a different area count than the frame"
        )
    a_pos = frame.a_idx
    if a_pos.size == 0:
        raise DomainError("frame has no sampled units")
    d_in_a = np.searchsorted(a_pos, frame.d_idx)
    z = np.zeros((frame.n_areas, a_pos.size))
    K = usage.K
    y_d = frame.y[frame.d_idx]
    z[:, d_in_a] = K * y_d[None, :]
    return PseudoValueSet(z=z, a_unit_ids=frame.unit_id[a_pos].copy())


@dataclass(frozen=True)
class BootstrapEstimate:
    """Monte Carlo mean and variance of the per-area imputed mass."""

    e_hat: np.ndarray
    var_hat: np.ndarray
    n_resamples: int
    seed: int | None


# Resample index blocks are drawn in fixed-size chunks so the draw
# sequence, and therefore the result, never depends on memory or threads.
_CHUNK_CELLS = 1 << 21


def fixed_k_bootstrap(
    psi: PseudoValueSet,
    n_resamples: int,
    seed: int | None = None,
    n_threads: int = 1,
) -> BootstrapEstimate:
    """With-replacement bootstrap of the sample, fixed donor usage.

    Each area uses its own child seed stream, so per-area results do not
    depend on how many areas are processed or in what order. The variance
    uses the 1/B divisor (a plain Monte Carlo second moment about the
    resample mean).
    """
    if n_resamples < 2:
        raise DomainError(f"need at least 2 resamples, got {n_resamples}")
    n = psi.n_sample
    m_areas = psi.n_areas
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(m_areas)
    e_hat = np.empty(m_areas)
    var_hat = np.empty(m_areas)
    rows = max(1, _CHUNK_CELLS // max(1, n))

    def run(m: int) -> None:
        sums = _area_resample_sums(psi.z[m], n, n_resamples, children[m], rows)
        mean = sums.mean()
        e_hat[m] = mean
        var_hat[m] = float(np.mean((sums - mean) ** 2))

    if n_threads > 1 and m_areas > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run, range(m_areas)))
    else:
        for m in range(m_areas):
            run(m)
    return BootstrapEstimate(
        e_hat=e_hat, var_hat=var_hat, n_resamples=n_resamples, seed=seed
    )


def _area_resample_sums(z_m, n, n_resamples, child_seed, rows) -> np.ndarray:
    rng = np.random.default_rng(child_seed)
    sums = np.empty(n_resamples)
    done = 0
    while done < n_resamples:
        take = min(rows, n_resamples - done)
        idx = rng.integers(0, n, size=(take, n))
        sums[done : done + take] = z_m[idx].sum(axis=1)
        done += take
    return sums


def bootstrap_size(target_cv: float) -> int:
    """Resamples needed for a target coefficient of variation of Var-hat.

    B = ceil((1.71 / target_cv)^2), with a one-part-in-1e12 shave so a
    ratio that is an integer up to float error is not pushed to the next
    integer by ceil.
    """
    if not (isinstance(target_cv, (int, float)) and math.isfinite(target_cv)):
        raise DomainError("target_cv must be a finite number")
    if target_cv <= 0:
        raise DomainError(f"target_cv must be positive, got {target_cv}")
    ratio = (BOOTSTRAP_CV_CONSTANT / target_cv) ** 2
    return max(1, math.ceil(ratio * (1.0 - 1e-12)))


def achieved_cv(n_resamples: int) -> float:
    """Approximate CV of Var-hat at a given resample count (rule inverse)."""
    if n_resamples < 1:
        raise DomainError(f"n_resamples must be >= 1, got {n_resamples}")
    return BOOTSTRAP_CV_CONSTANT / math.sqrt(n_resamples)


PILOT_RESAMPLES = 100
_PILOT_BATCHES = 10


def pilot_cv(psi: PseudoValueSet, seed=None, pilot_b: int = PILOT_RESAMPLES) -> float:
    """Measure the CV of the variance estimator with a small pilot run.

    The pilot's resample sums (national pseudo-values) are split into
    batches; the spread of the per-batch variances, rescaled from the
    batch size to `pilot_b`, estimates the CV of Var-hat at the pilot
    size. Reported as a diagnostic next to the bootstrap_size rule.
    """
    if pilot_b < _PILOT_BATCHES * 2:
        raise DomainError(f"pilot needs at least {_PILOT_BATCHES * 2} resamples")
    national = PseudoValueSet(
        z=psi.z.sum(axis=0, keepdims=True), a_unit_ids=psi.a_unit_ids
    )
    boot = _resample_sums(national, pilot_b, seed)
    batch = pilot_b // _PILOT_BATCHES
    sums = boot[0, : batch * _PILOT_BATCHES].reshape(_PILOT_BATCHES, batch)
    variances = ((sums - sums.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
    mean_v = variances.mean()
    if mean_v <= 0.0:
        return 0.0
    cv_at_batch = float(variances.std(ddof=1) / mean_v)
    return cv_at_batch * math.sqrt(batch / pilot_b)


def _resample_sums(psi: PseudoValueSet, n_resamples: int, seed) -> np.ndarray:
    """(M, B) matrix of resample sums, same stream layout as the bootstrap."""
    n = psi.n_sample
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(psi.n_areas)
    out = np.empty((psi.n_areas, n_resamples))
    rows = max(1, _CHUNK_CELLS // max(1, n))
    for m in range(psi.n_areas):
        out[m] = _area_resample_sums(psi.z[m], n, n_resamples, children[m], rows)
    return out


@dataclass(frozen=True)
class BiasEstimate:
    """Relative imputation bias per area from leave-one-out donors.

    e[m-1] is sum(y_hat - y) / sum(y_hat) over the area's donors when that
    ratio is stable, else the pooled all-donor ratio. `method` records
    which was used.
    """

    e: np.ndarray
    method: tuple[str, ...]
    pooled: float
    num: np.ndarray
    den: np.ndarray
    n_donors: np.ndarray


def estimate_bias(
    frame: PopulationFrame,
    k: int,
    mask: FeatureMask,
    w,
    n_threads: int = 1,
) -> BiasEstimate:
    """Leave-one-out relative bias with small-area pooling.

    A binary response pools an area when its donor predicted mass is at
    most 5; a continuous response pools when the area has at most 5
    donors. A zero denominator always pools.
    """
    y_hat, _, _ = loo_impute(frame, k, mask, w, n_threads=n_threads)
    d_pos = frame.d_idx
    y_obs = frame.y[d_pos]
    areas = frame.area_id[d_pos] - 1
    m_areas = frame.n_areas
    num = np.zeros(m_areas)
    den = np.zeros(m_areas)
    n_donors = np.zeros(m_areas, dtype=np.int64)
    np.add.at(num, areas, y_hat - y_obs)
    np.add.at(den, areas, y_hat)
    np.add.at(n_donors, areas, 1)

    den_all = float(den.sum())
    pooled = float(num.sum() / den_all) if den_all > 0 else 0.0
    binary = frame.is_binary_response()
    if binary:
        stable = den > POOLING_THRESHOLD
    else:
        stable = (n_donors > POOLING_THRESHOLD) & (den != 0.0)
    e = np.where(stable, np.divide(num, den, out=np.zeros_like(num), where=den != 0.0), pooled)
    method = tuple("area" if s else "pooled" for s in stable)
    return BiasEstimate(
        e=e, method=method, pooled=pooled, num=num, den=den, n_donors=n_donors
    )


@dataclass(frozen=True)
class SmallAreaReport:
    """Per-area estimates with variance, bias, MSE, and intervals.

    MSE_m = Var_m + (E_m * e_m)^2: bootstrap variance plus the squared
    product of the bootstrap mean imputed mass and the relative bias.
    Truth-dependent columns are present only when true totals are given.
    """

    area: np.ndarray
    t_hat: np.ndarray
    var_hat: np.ndarray
    e_boot: np.ndarray
    bias_rel: np.ndarray
    bias_method: tuple[str, ...]
    mse: np.ndarray
    rtmse: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    truth: np.ndarray | None = None
    abs_err: np.ndarray | None = None
    covered: np.ndarray | None = None

    @property
    def n_areas(self) -> int:
        return self.area.size

    def aggregates(self) -> dict:
        """Scalar summaries; truth-based entries are None without truth."""
        pos = self.t_hat > 0
        out = {
            "n_areas": int(self.n_areas),
            "t_hat_national": float(self.t_hat.sum()),
            "mean_rtmse": float(self.rtmse.mean()),
            "arrtmse": float((self.rtmse[pos] / self.t_hat[pos]).mean())
            if pos.any()
            else None,
            "aaee": None,
            "coverage": None,
            "coverage_consistent_with_nominal": None,
            "coverage_pvalue": None,
        }
        if self.truth is not None:
            out["aaee"] = float(self.abs_err.mean())
            n_cov = int(self.covered.sum())
            out["coverage"] = n_cov / self.n_areas
            test = binomtest(n_cov, self.n_areas, NOMINAL_COVERAGE)
            out["coverage_pvalue"] = float(test.pvalue)
            out["coverage_consistent_with_nominal"] = bool(test.pvalue >= 0.05)
        return out


def assemble_report(
    t_hat,
    boot: BootstrapEstimate,
    bias: BiasEstimate,
    truth=None,
) -> SmallAreaReport:
    """Combine per-area totals, bootstrap moments, and bias into a report."""
    t_hat = np.asarray(t_hat, dtype=float)
    m = t_hat.size
    if boot.e_hat.shape != (m,) or boot.var_hat.shape != (m,) or bias.e.shape != (m,):
        raise AlignmentError("report inputs disagree on the number of areas")
    mse = boot.var_hat + (boot.e_hat * bias.e) ** 2
    rtmse = np.sqrt(mse)
    ci_lo = t_hat - NORMAL_CI_MULTIPLIER * rtmse
    ci_hi = t_hat + NORMAL_CI_MULTIPLIER * rtmse
    truth_arr = abs_err = covered = None
    if truth is not None:
        truth_arr = np.asarray(truth, dtype=float)
        if truth_arr.shape != (m,):
            raise AlignmentError("truth must have one total per area")
        abs_err = np.abs(t_hat - truth_arr)
        covered = (ci_lo <= truth_arr) & (truth_arr <= ci_hi)
    return SmallAreaReport(
        area=np.arange(1, m + 1),
        t_hat=t_hat,
        var_hat=boot.var_hat.copy(),
        e_boot=boot.e_hat.copy(),
        bias_rel=bias.e.copy(),
        bias_method=bias.method,
        mse=mse,
        rtmse=rtmse,
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        truth=truth_arr,
        abs_err=abs_err,
        covered=covered,
    )


def write_report_csv(report: SmallAreaReport, path) -> None:
    """One row per area; truth columns only when available."""
    path = Path(path)
    cols = [
        ("area", report.area),
        ("t_hat", report.t_hat),
        ("var_hat", report.var_hat),
        ("e_boot", report.e_boot),
        ("bias_rel", report.bias_rel),
        ("bias_method", report.bias_method),
        ("mse", report.mse),
        ("rtmse", report.rtmse),
        ("ci_lo", report.ci_lo),
        ("ci_hi", report.ci_hi),
    ]
    if report.truth is not None:
        cols += [
            ("truth", report.truth),
            ("abs_err", report.abs_err),
            ("covered", report.covered.astype(int)),
        ]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([name for name, _ in cols])
        for i in range(report.n_areas):
            row = []
            for name, arr in cols:
                v = arr[i]
                if name in ("area", "covered"):
                    row.append(int(v))
                elif name == "bias_method":
                    row.append(v)
                else:
                    row.append(repr(float(v)))
            writer.writerow(row)


def write_aggregates_json(report: SmallAreaReport, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        json.dump(report.aggregates(), fh, indent=2, sort_keys=True)
        fh.write("\n")
