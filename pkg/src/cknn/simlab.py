"""Synthetic populations, informative big-data selection, and Monte Carlo.

The lab builds unit-level populations with categorical features, an
area-varying binary response, and a deliberately informative (missing not
at random) big-data inclusion rule: areas belong to one of three regions,
and region membership drives which units the big data captures. The Monte
Carlo driver replays the survey design, runs the requested estimators on a
frame whose unobserved responses are masked out, and aggregates accuracy
and coverage against the retained truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fh as fh_mod
from .calibration import data_integrator, hybrid_estimate
from .errors import DomainError, SpecError, ValidationError
from .frame import PopulationFrame
from .hasd import FeatureMask
from .tuning import grid_search
from .uncertainty import (
    NORMAL_CI_MULTIPLIER,
    assemble_report,
    bootstrap_size,
    estimate_bias,
    fixed_k_bootstrap,
    pseudo_values,
)

__all__ = [
    "PopulationSpec",
    "SyntheticPopulation",
    "SimulationConfig",
    "Scenario",
    "EfficiencyDiagnostics",
    "MonteCarloReport",
    "synthesize_population",
    "select_big_data",
    "draw_srs",
    "apply_undercoverage",
    "compute_efficiency",
    "run_monte_carlo",
    "RealizedScenario",
    "realize_scenario",
    "reference_region_map",
    "reference_spec",
    "reference_scenario",
    "parse_scenario",
    "write_scenario",
]

# Big-data capture rates by region: region 1 keeps half its responders
# (volunteers), region 2 half its non-responders, region 3 a flat 80%.
REGION_VOLUNTEER_RATE = 0.5
REGION_REFUSER_RATE = 0.5
REGION_BLANKET_RATE = 0.8
# Reference layout: 56 equal-size areas split 6 / 17 / 33 across the three
# regions, giving region population shares near 0.11 / 0.30 / 0.59 so the
# captured stratum lands near 60% of units and 52% of responders.
REFERENCE_REGION_COUNTS = (6, 17, 33)
UNDERCOVERAGE_BLOCKS = 7


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class PopulationSpec:
    """Knobs for one synthetic population.

    `area_size_weights` are relative expected area sizes (None for equal).
    `area_groups` tags each area with a group label; areas in the same
    group share a feature-mix tilt, which is how region structure leaks
    into the observable features. `effect_scale` scales the feature level
    effects on the response logit; `rate_range` bounds the per-area
    response rates.
    """

    n_units: int
    n_areas: int
    rate_range: tuple[float, float] = (0.11, 0.31)
    feature_levels: tuple[int, ...] = (3, 5, 7, 2)
    area_size_weights: tuple[float, ...] | None = None
    area_groups: tuple[int, ...] | None = None
    effect_scale: float = 0.7
    mix_concentration: float = 25.0
    group_tilt_scale: float = 0.9

    def __post_init__(self):
        if self.n_areas < 1 or self.n_units < self.n_areas:
            raise DomainError("need n_units >= n_areas >= 1")
        lo, hi = self.rate_range
        if not (0.0 < lo <= hi < 1.0):
            raise DomainError(f"rate_range must satisfy 0 < lo <= hi < 1, got {self.rate_range}")
        if len(self.feature_levels) < 1 or any(l < 2 for l in self.feature_levels):
            raise DomainError("every feature needs at least 2 levels")
        if self.area_size_weights is not None:
            if len(self.area_size_weights) != self.n_areas:
                raise DomainError("area_size_weights must have one entry per area")
            if any(w <= 0 for w in self.area_size_weights):
                raise DomainError("area_size_weights must be positive")
        if self.area_groups is not None and len(self.area_groups) != self.n_areas:
            raise DomainError("area_groups must have one entry per area")


@dataclass(frozen=True)
class SyntheticPopulation:
    """A generated frame plus the truth withheld from estimators."""

    frame: PopulationFrame
    true_area_totals: np.ndarray
    area_rates: np.ndarray
    seed_entropy: tuple

    @property
    def national_truth(self) -> float:
        return float(self.true_area_totals.sum())


def _apportion(n: int, weights: np.ndarray) -> np.ndarray:
    """Split n units over areas by largest remainder; every area gets >= 1.

    Deterministic, so area sizes are a fixed property of the design (equal
    weights with n divisible by the area count give exactly equal areas).
    """
    shares = weights / weights.sum()
    exact = n * shares
    sizes = np.floor(exact).astype(np.int64)
    short = n - int(sizes.sum())
    if short > 0:
        # Hand leftovers to the largest fractional parts, lowest area first
        # on ties.
        frac = exact - sizes
        order = np.lexsort((np.arange(sizes.size), -frac))
        sizes[order[:short]] += 1
    while (sizes == 0).any():
        sizes[int(np.argmax(sizes))] -= 1
        sizes[int(np.argmin(sizes))] += 1
    return sizes


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _area_intercept(scores: np.ndarray, rate: float) -> float:
    """Bisect the intercept so the area's mean response probability hits `rate`."""
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + scores).mean() < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synthesize_population(spec: PopulationSpec, seed=None) -> SyntheticPopulation:
    """Draw one population: sizes, feature mixes, and responses per area.

    Feature mixes are Dirichlet draws around a national base composition,
    tilted by area group so grouped areas are recognisably similar in
    feature space. Response probabilities are logistic in centred feature
    level effects with a per-area intercept bisected to hit that area's
    target rate.
    """
    root = _seed_sequence(seed)
    structure_ss, area_ss, unit_ss = root.spawn(3)
    structure = np.random.default_rng(structure_ss)
    area_rng = np.random.default_rng(area_ss)
    unit_rng = np.random.default_rng(unit_ss)

    m = spec.n_areas
    n = spec.n_units
    weights = (
        np.ones(m) if spec.area_size_weights is None else np.asarray(spec.area_size_weights, float)
    )
    sizes = _apportion(n, weights)
    area_id = np.repeat(np.arange(1, m + 1), sizes)
    unit_id = np.arange(1, n + 1)

    groups = (
        np.zeros(m, dtype=int)
        if spec.area_groups is None
        else np.asarray(spec.area_groups, dtype=int)
    )
    group_values = np.unique(groups)

    features = np.empty((n, len(spec.feature_levels)), dtype=float)
    effects = []
    starts = np.concatenate([[0], np.cumsum(sizes)])
    for j, n_levels in enumerate(spec.feature_levels):
        base = structure.dirichlet(np.full(n_levels, 8.0))
        tilts = {
            g: spec.group_tilt_scale * structure.normal(size=n_levels) for g in group_values
        }
        eff = spec.effect_scale * structure.normal(size=n_levels)
        effects.append(eff - eff.mean())
        for a in range(m):
            tilted = base * np.exp(tilts[groups[a]])
            alpha = spec.mix_concentration * (tilted / tilted.sum()) + 0.1
            probs = area_rng.dirichlet(alpha)
            draws = unit_rng.choice(n_levels, size=sizes[a], p=probs)
            features[starts[a] : starts[a + 1], j] = draws + 1

    scores = np.zeros(n)
    for j, eff in enumerate(effects):
        scores += eff[features[:, j].astype(int) - 1]

    rates = area_rng.uniform(spec.rate_range[0], spec.rate_range[1], size=m)
    y = np.empty(n)
    for a in range(m):
        sl = slice(starts[a], starts[a + 1])
        prob = _sigmoid(_area_intercept(scores[sl], rates[a]) + scores[sl])
        y[sl] = (unit_rng.random(sizes[a]) < prob).astype(float)

    frame = PopulationFrame.from_arrays(
        unit_id=unit_id,
        area_id=area_id,
        features=features,
        y=y,
        delta=np.zeros(n, dtype=bool),
        in_sample=np.zeros(n, dtype=bool),
        design_weight=np.full(n, np.nan),
        n_areas=m,
    )
    totals = np.zeros(m)
    np.add.at(totals, area_id - 1, y)
    return SyntheticPopulation(
        frame=frame,
        true_area_totals=totals,
        area_rates=rates,
        seed_entropy=tuple(root.entropy if isinstance(root.entropy, (list, tuple)) else [root.entropy]),
    )


def reference_region_map(n_areas: int) -> np.ndarray:
    """Three-region map with the reference 6:17:33 area proportions."""
    if n_areas < 3:
        raise DomainError(f"need at least 3 areas for 3 regions, got {n_areas}")
    c1, c2, _ = REFERENCE_REGION_COUNTS
    total = sum(REFERENCE_REGION_COUNTS)
    n1 = max(1, round(n_areas * c1 / total))
    n2 = max(1, round(n_areas * c2 / total))
    if n1 + n2 >= n_areas:
        n1, n2 = 1, max(1, n_areas - 2)
    region = np.full(n_areas, 3, dtype=np.int64)
    region[:n1] = 1
    region[n1 : n1 + n2] = 2
    return region


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_big_data(frame: PopulationFrame, region_map=None, seed=None) -> PopulationFrame:
    """Mark the big-data stratum B under the three-region MNAR rule.

    Region 1 captures half of each area's responders, region 2 half of
    each area's non-responders, region 3 a flat 80% of units. The region
    labels are used only here and are not recorded on the frame, so
    estimators never see them.
    """
    if region_map is None:
        region_map = reference_region_map(frame.n_areas)
    region_map = np.asarray(region_map, dtype=np.int64)
    if region_map.shape != (frame.n_areas,):
        raise ValidationError("region_map must assign every area a region")
    if not np.isin(region_map, (1, 2, 3)).all():
        raise ValidationError("regions must be labelled 1, 2, or 3")
    if not frame.is_binary_response():
        raise DomainError("big-data selection needs a fully observed binary response")
    if not np.isfinite(frame.y).all():
        raise DomainError("big-data selection needs y observed for every unit")

    root = _seed_sequence(seed)
    children = root.spawn(frame.n_areas)
    delta = np.zeros(frame.n_units, dtype=bool)
    for a in range(frame.n_areas):
        rng = np.random.default_rng(children[a])
        pos = np.flatnonzero(frame.area_id == a + 1)
        region = region_map[a]
        if region == 1:
            pool = pos[frame.y[pos] == 1.0]
            rate = REGION_VOLUNTEER_RATE
        elif region == 2:
            pool = pos[frame.y[pos] == 0.0]
            rate = REGION_REFUSER_RATE
        else:
            pool = pos
            rate = REGION_BLANKET_RATE
        take = _round_half_up(rate * pool.size)
        if take > 0:
            delta[rng.permutation(pool)[:take]] = True
    return frame.with_flags(delta=delta)


def draw_srs(frame: PopulationFrame, n: int, seed=None) -> PopulationFrame:
    """Simple random sample without replacement, weights N / n."""
    if not 2 <= n <= frame.n_units:
        raise DomainError(f"sample size must be in [2, N], got {n}")
    rng = np.random.default_rng(_seed_sequence(seed))
    chosen = rng.permutation(frame.n_units)[:n]
    in_sample = np.zeros(frame.n_units, dtype=bool)
    in_sample[chosen] = True
    weight = np.full(frame.n_units, np.nan)
    weight[chosen] = frame.n_units / n
    return frame.with_flags(in_sample=in_sample, design_weight=weight)


def _block_of_area(n_areas: int) -> tuple[np.ndarray, int]:
    block_size = math.ceil(n_areas / UNDERCOVERAGE_BLOCKS)
    blocks = (np.arange(n_areas) // block_size) + 1
    return blocks, int(blocks.max())


def apply_undercoverage(
    frame: PopulationFrame, experiment: int, seed=None, age_feature: int | None = None
) -> PopulationFrame:
    """Delete records to mimic a degraded covariate source.

    Areas are grouped into up to 7 blocks of ceil(M / 7) consecutive
    areas. Experiment 1 deletes 5b% of the units holding the b-th level
    of the age-like feature in block b; experiment 2 deletes (30 + 5b)%
    of all units in block b. Deletion is without replacement within each
    area.
    """
    if experiment not in (1, 2):
        raise SpecError(f"undercoverage experiment must be 1 or 2, got {experiment}")
    blocks, n_blocks = _block_of_area(frame.n_areas)
    if age_feature is None:
        cards = [np.unique(frame.features[:, j]).size for j in range(frame.p_max)]
        age_feature = int(np.argmax(cards))
    level_codes = np.unique(frame.features[:, age_feature])
    if experiment == 1 and level_codes.size < n_blocks:
        raise SpecError(
            f"experiment 1 needs >= {n_blocks} levels in feature {age_feature}, "
            f"found {level_codes.size}"
        )

    root = _seed_sequence(seed)
    children = root.spawn(frame.n_areas)
    keep = np.ones(frame.n_units, dtype=bool)
    for a in range(frame.n_areas):
        b = int(blocks[a])
        rng = np.random.default_rng(children[a])
        pos = np.flatnonzero(frame.area_id == a + 1)
        if experiment == 1:
            rate = 0.05 * b
            pool = pos[frame.features[pos, age_feature] == level_codes[b - 1]]
        else:
            rate = 0.30 + 0.05 * b
            pool = pos
        drop = _round_half_up(rate * pool.size)
        if drop > 0:
            keep[rng.permutation(pool)[:drop]] = False
    return frame.subset(keep)


@dataclass(frozen=True)
class EfficiencyDiagnostics:
    """Design-variance comparison of the hybrid and sample-only estimators.

    ratio_theory = (1 - W_B) S_C^2 / S^2 is the closed-form variance ratio
    Var(T_p) / Var(T_A); ratio_empirical is the same ratio measured over
    Monte Carlo replicates (None when fewer than 2 replicates ran).
    """

    w_b: float
    s2_c: float
    s2: float
    ybar_c: float
    t_true: float
    ratio_theory: float
    mean_t_p: float | None = None
    mean_t_a: float | None = None
    var_t_p: float | None = None
    var_t_a: float | None = None
    ratio_empirical: float | None = None


def compute_efficiency(frame: PopulationFrame) -> EfficiencyDiagnostics:
    """Population-level terms of the variance-ratio identity.

    Both spreads use population (not sample) divisors: S_C^2 averages the
    squared deviations of the missed stratum around its own mean over N_C,
    and S^2 the whole-population squared deviations over N.
    """
    if not np.isfinite(frame.y).all():
        raise DomainError("efficiency diagnostics need fully observed y")
    n = frame.n_units
    n_b = frame.b_idx.size
    n_c = n - n_b
    if n_c == 0 or n_b == 0:
        raise DomainError("need both strata non-empty for the variance ratio")
    c_mask = ~frame.delta
    y_c = frame.y[c_mask]
    ybar_c = float(y_c.mean())
    s2_c = float(((y_c - ybar_c) ** 2).sum() / n_c)
    ybar = float(frame.y.mean())
    s2 = float(((frame.y - ybar) ** 2).sum() / n)
    w_b = n_b / n
    if s2 == 0.0:
        raise DomainError("population response has zero variance")
    return EfficiencyDiagnostics(
        w_b=w_b,
        s2_c=s2_c,
        s2=s2,
        ybar_c=ybar_c,
        t_true=float(frame.y.sum()),
        ratio_theory=(1.0 - w_b) * s2_c / s2,
    )


@dataclass(frozen=True)
class SimulationConfig:
    """What the Monte Carlo driver runs on each replicate."""

    region_map: tuple[int, ...] | None = None
    n_sample: int | None = None
    estimators: tuple[str, ...] = ("integrator", "hybrid", "fh")
    experiments: tuple[int, ...] = ()
    tune: bool = False
    k: int = 5
    features: tuple[int, ...] | None = None
    k_max: int = 20
    folds: int = 5
    bootstrap_b: int = 500
    target_cv: float | None = None
    regenerate_population: bool = False
    n_threads: int = 1

    def __post_init__(self):
        known = {"integrator", "hybrid", "fh"}
        bad = set(self.estimators) - known
        if bad:
            raise DomainError(f"unknown estimators: {sorted(bad)}")
        if set(self.experiments) - {1, 2}:
            raise DomainError("experiments must be a subset of {1, 2}")
        if self.experiments and "fh" not in self.estimators:
            raise DomainError("undercoverage experiments require the fh estimator")


@dataclass(frozen=True)
class Scenario:
    """A full simulation recipe: population, config, replicate count, seed."""

    spec: PopulationSpec
    config: SimulationConfig
    replicates: int = 1
    seed: int = 0
    reference_layout: bool = True


@dataclass(frozen=True)
class MonteCarloReport:
    """Per-replicate metric rows plus their means/medians and diagnostics."""

    rows: tuple[dict, ...]
    aggregates: dict
    efficiency: EfficiencyDiagnostics | None
    truth: np.ndarray | None
    n_replicates: int
    seed: int | None


def _hybrid_replicate(frame, truth, config, fold_ss, boot_ss):
    if config.tune:
        grid = grid_search(
            frame,
            k_range=range(1, config.k_max + 1),
            feature_subsets="all",
            n_folds=config.folds,
            seed=fold_ss,
            n_threads=config.n_threads,
        )
        k, mask = grid.best.k, grid.best.mask
    else:
        k = config.k
        mask = FeatureMask(
            tuple(range(frame.p_max)) if config.features is None else config.features
        )
    est = hybrid_estimate(frame, k, mask, n_threads=config.n_threads)
    n_resamples = (
        bootstrap_size(config.target_cv) if config.target_cv else config.bootstrap_b
    )
    psi = pseudo_values(frame, est.imputation.usage)
    boot = fixed_k_bootstrap(psi, n_resamples, boot_ss, n_threads=config.n_threads)
    bias = estimate_bias(frame, k, mask, est.calibration.w, n_threads=config.n_threads)
    report = assemble_report(est.per_area, boot, bias, truth=truth)
    agg = report.aggregates()
    return {
        "hybrid_k": k,
        "hybrid_features": mask.label(),
        "hybrid_t_p": est.t_p,
        "hybrid_aaee": agg["aaee"],
        "hybrid_arrtmse": agg["arrtmse"],
        "hybrid_coverage": agg["coverage"],
        "hybrid_fallback": est.calibration.diagnostics.fallback,
    }


def _fh_replicate(frame, truth, experiments, uc_seeds):
    out = {}
    variants = [("fh", None)] + [(f"fh_exp{e}", e) for e in experiments]
    for name, exp in variants:
        if exp is None:
            cov = None
        else:
            cov = apply_undercoverage(frame, exp, seed=uc_seeds[exp - 1])
        inputs = fh_mod.direct_estimates(frame, covariate_frame=cov)
        model = fh_mod.fit_fh(inputs)
        pred = fh_mod.fh_predict_mse(model, inputs)
        out[f"{name}_aaee"] = float(np.abs(pred.t_fh - truth).mean())
        lo = pred.t_fh - NORMAL_CI_MULTIPLIER * pred.rtmse
        hi = pred.t_fh + NORMAL_CI_MULTIPLIER * pred.rtmse
        out[f"{name}_coverage"] = float(((lo <= truth) & (truth <= hi)).mean())
        pos = pred.t_fh > 0
        out[f"{name}_arrtmse"] = (
            float((pred.rtmse[pos] / pred.t_fh[pos]).mean()) if pos.any() else None
        )
        out[f"{name}_sigma2_u"] = model.sigma2_u
        out[f"{name}_fallback"] = model.fit.used_fallback
    return out


def run_monte_carlo(
    spec: PopulationSpec,
    replicates: int,
    config: SimulationConfig,
    seed=None,
) -> MonteCarloReport:
    """Replay the design `replicates` times and score every estimator.

    The population and big-data stratum are drawn once (or per replicate
    when `regenerate_population` is set); the probability sample is fresh
    in every replicate. Estimators only ever see a frame whose response is
    masked outside the big data and the sample.
    """
    if replicates < 1:
        raise DomainError(f"need at least 1 replicate, got {replicates}")
    root = _seed_sequence(seed)
    pop_ss, big_ss, rep_root = root.spawn(3)
    rep_seeds = rep_root.spawn(replicates)

    pop = None
    marked = None
    if not config.regenerate_population:
        pop = synthesize_population(spec, pop_ss)
        marked = select_big_data(pop.frame, config.region_map, big_ss)

    n_sample = config.n_sample or max(2, round(spec.n_units / 100))
    rows = []
    t_p_list, t_a_list = [], []
    for r in range(replicates):
        srs_ss, fold_ss, boot_ss, uc1_ss, uc2_ss, regen_ss = rep_seeds[r].spawn(6)
        if config.regenerate_population:
            pop_r_ss, big_r_ss = regen_ss.spawn(2)
            pop = synthesize_population(spec, pop_r_ss)
            marked = select_big_data(pop.frame, config.region_map, big_r_ss)
        sampled = draw_srs(marked, n_sample, srs_ss)
        frame = sampled.mask_unobserved()
        truth = pop.true_area_totals

        row = {"replicate": r + 1}
        integ = data_integrator(frame)
        t_a = frame.n_units / n_sample * float(frame.y[frame.a_idx].sum())
        row["t_p"] = integ.t_p
        row["t_a"] = t_a
        row["t_true"] = pop.national_truth
        t_p_list.append(integ.t_p)
        t_a_list.append(t_a)
        if "hybrid" in config.estimators:
            row.update(_hybrid_replicate(frame, truth, config, fold_ss, boot_ss))
        if "fh" in config.estimators:
            row.update(_fh_replicate(frame, truth, config.experiments, (uc1_ss, uc2_ss)))
        rows.append(row)

    efficiency = None
    if not config.regenerate_population:
        eff = compute_efficiency(marked)
        n_rep = len(t_p_list)
        if n_rep >= 2:
            efficiency = replace(
                eff,
                mean_t_p=float(np.mean(t_p_list)),
                mean_t_a=float(np.mean(t_a_list)),
                var_t_p=float(np.var(t_p_list, ddof=1)),
                var_t_a=float(np.var(t_a_list, ddof=1)),
                ratio_empirical=float(
                    np.var(t_p_list, ddof=1) / np.var(t_a_list, ddof=1)
                )
                if np.var(t_a_list, ddof=1) > 0
                else None,
            )
        else:
            efficiency = eff

    metric_keys = sorted(
        k for k in rows[0] if k != "replicate" and isinstance(rows[0][k], (int, float))
    )
    aggregates = {}
    for key in metric_keys:
        vals = np.array([row[key] for row in rows if row.get(key) is not None], dtype=float)
        if vals.size == 0:
            continue
        aggregates[f"mean_{key}"] = float(vals.mean())
        aggregates[f"median_{key}"] = float(np.median(vals))
    return MonteCarloReport(
        rows=tuple(rows),
        aggregates=aggregates,
        efficiency=efficiency,
        truth=None if pop is None else pop.true_area_totals,
        n_replicates=replicates,
        seed=seed if isinstance(seed, int) else None,
    )


@dataclass(frozen=True)
class RealizedScenario:
    """One concrete dataset drawn from a scenario, plus downstream seeds.

    The stream layout matches replicate 1 of `run_monte_carlo` with the
    same scenario seed, so a single estimation run on a realized scenario
    reproduces the first Monte Carlo replicate exactly.
    """

    frame: PopulationFrame
    truth: np.ndarray
    population: SyntheticPopulation
    fold_seed: np.random.SeedSequence
    bootstrap_seed: np.random.SeedSequence
    undercoverage_seeds: tuple[np.random.SeedSequence, np.random.SeedSequence]


def realize_scenario(scenario: Scenario) -> RealizedScenario:
    """Synthesize, select, sample, and mask one dataset from a scenario."""
    spec, config = scenario.spec, scenario.config
    root = _seed_sequence(scenario.seed)
    pop_ss, big_ss, rep_root = root.spawn(3)
    rep0 = rep_root.spawn(1)[0]
    srs_ss, fold_ss, boot_ss, uc1_ss, uc2_ss, regen_ss = rep0.spawn(6)
    if config.regenerate_population:
        pop_r_ss, big_r_ss = regen_ss.spawn(2)
        pop = synthesize_population(spec, pop_r_ss)
        marked = select_big_data(pop.frame, config.region_map, big_r_ss)
    else:
        pop = synthesize_population(spec, pop_ss)
        marked = select_big_data(pop.frame, config.region_map, big_ss)
    n_sample = config.n_sample or max(2, round(spec.n_units / 100))
    sampled = draw_srs(marked, n_sample, srs_ss)
    return RealizedScenario(
        frame=sampled.mask_unobserved(),
        truth=pop.true_area_totals,
        population=pop,
        fold_seed=fold_ss,
        bootstrap_seed=boot_ss,
        undercoverage_seeds=(uc1_ss, uc2_ss),
    )


# Within-region area-size gradient: smallest to largest relative size.
# At the reference scale (N = 173,021, 1% SRS) this spreads expected
# per-area sample sizes from single digits to the low sixties.
REFERENCE_SIZE_GRADIENT = (0.25, 2.1)


def reference_size_weights(region_map: np.ndarray) -> tuple[float, ...]:
    """Relative area sizes: a linear ramp within each region, mean 1.

    Normalising within the region keeps each region's population share
    equal to its share of areas, which is what fixes the captured-stratum
    share near 60%.
    """
    region_map = np.asarray(region_map)
    weights = np.empty(region_map.size)
    lo, hi = REFERENCE_SIZE_GRADIENT
    for r in np.unique(region_map):
        pos = np.flatnonzero(region_map == r)
        ramp = np.linspace(lo, hi, pos.size) if pos.size > 1 else np.array([1.0])
        weights[pos] = ramp / ramp.mean()
    return tuple(float(v) for v in weights)


def reference_spec(n_units: int = 173021, n_areas: int = 56) -> tuple[PopulationSpec, np.ndarray]:
    """Reference population and region map (graded area sizes, 3 regions)."""
    region_map = reference_region_map(n_areas)
    spec = PopulationSpec(
        n_units=n_units,
        n_areas=n_areas,
        area_size_weights=reference_size_weights(region_map),
        area_groups=tuple(int(g) for g in region_map),
    )
    return spec, region_map


def reference_scenario(n_units: int = 173021, n_areas: int = 56, replicates: int = 1, seed: int = 0) -> Scenario:
    spec, region_map = reference_spec(n_units, n_areas)
    config = SimulationConfig(region_map=tuple(int(g) for g in region_map))
    return Scenario(
        spec=spec, config=config, replicates=replicates, seed=seed, reference_layout=True
    )


# Scenario files are flat key = value text; these are the recognised keys
# and their parsers. Lists are comma separated.
def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise SpecError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(tok) for tok in s.split(",") if tok.strip()) if s else ()


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in s.split(",") if tok.strip())


_SCENARIO_KEYS = {
    "n_units": int,
    "n_areas": int,
    "rate_lo": float,
    "rate_hi": float,
    "feature_levels": _parse_int_list,
    "effect_scale": float,
    "mix_concentration": float,
    "group_tilt_scale": float,
    "reference_layout": _parse_bool,
    "region_map": _parse_int_list,
    "n_sample": int,
    "estimators": _parse_str_list,
    "experiments": _parse_int_list,
    "tune": _parse_bool,
    "k": int,
    "features": _parse_int_list,
    "k_max": int,
    "folds": int,
    "bootstrap_b": int,
    "target_cv": float,
    "regenerate_population": _parse_bool,
    "replicates": int,
    "seed": int,
}


def parse_scenario(path) -> Scenario:
    """Read a key = value scenario file into a Scenario."""
    path = Path(path)
    if not path.exists():
        raise SpecError(f"scenario file not found: {path}")
    raw: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise SpecError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCENARIO_KEYS:
            raise SpecError(f"{path}:{lineno}: unknown scenario key {key!r}")
        if key in raw:
            raise SpecError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            raw[key] = _SCENARIO_KEYS[key](value)
        except (ValueError, SpecError) as exc:
            raise SpecError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return build_scenario(raw)


def build_scenario(raw: dict) -> Scenario:
    """Assemble a Scenario from parsed key/value pairs (defaults applied)."""
    n_units = raw.get("n_units", 173021)
    n_areas = raw.get("n_areas", 56)
    reference_layout = raw.get("reference_layout", True)
    region_map = raw.get("region_map")
    area_groups = None
    if region_map is not None:
        if len(region_map) != n_areas:
            raise SpecError("region_map must list one region per area")
        area_groups = region_map
    elif reference_layout:
        region_map = tuple(int(g) for g in reference_region_map(n_areas))
        area_groups = region_map
    size_weights = None
    if reference_layout and region_map is not None:
        size_weights = reference_size_weights(np.asarray(region_map))
    spec_kwargs = dict(
        n_units=n_units,
        n_areas=n_areas,
        rate_range=(raw.get("rate_lo", 0.11), raw.get("rate_hi", 0.31)),
        area_groups=area_groups,
        area_size_weights=size_weights,
    )
    if "feature_levels" in raw:
        spec_kwargs["feature_levels"] = raw["feature_levels"]
    for key in ("effect_scale", "mix_concentration", "group_tilt_scale"):
        if key in raw:
            spec_kwargs[key] = raw[key]
    spec = PopulationSpec(**spec_kwargs)

    config = SimulationConfig(
        region_map=region_map,
        n_sample=raw.get("n_sample"),
        estimators=raw.get("estimators", ("integrator", "hybrid", "fh")),
        experiments=raw.get("experiments", ()),
        tune=raw.get("tune", False),
        k=raw.get("k", 5),
        features=raw.get("features"),
        k_max=raw.get("k_max", 20),
        folds=raw.get("folds", 5),
        bootstrap_b=raw.get("bootstrap_b", 500),
        target_cv=raw.get("target_cv"),
        regenerate_population=raw.get("regenerate_population", False),
    )
    return Scenario(
        spec=spec,
        config=config,
        replicates=raw.get("replicates", 1),
        seed=raw.get("seed", 0),
        reference_layout=reference_layout,
    )


def write_scenario(scenario: Scenario, path) -> None:
    """Write a Scenario back to key = value form (round-trips via parse)."""
    spec, config = scenario.spec, scenario.config
    lines = [
        f"n_units = {spec.n_units}",
        f"n_areas = {spec.n_areas}",
        f"rate_lo = {spec.rate_range[0]!r}",
        f"rate_hi = {spec.rate_range[1]!r}",
        "feature_levels = " + ",".join(str(v) for v in spec.feature_levels),
        f"effect_scale = {spec.effect_scale!r}",
        f"mix_concentration = {spec.mix_concentration!r}",
        f"group_tilt_scale = {spec.group_tilt_scale!r}",
        f"reference_layout = {str(scenario.reference_layout).lower()}",
    ]
    if config.region_map is not None:
        lines.append("region_map = " + ",".join(str(v) for v in config.region_map))
    if config.n_sample is not None:
        lines.append(f"n_sample = {config.n_sample}")
    lines.append("estimators = " + ",".join(config.estimators))
    if config.experiments:
        lines.append("experiments = " + ",".join(str(e) for e in config.experiments))
    lines.append(f"tune = {str(config.tune).lower()}")
    lines.append(f"k = {config.k}")
    if config.features is not None:
        lines.append("features = " + ",".join(str(f) for f in config.features))
    lines.append(f"k_max = {config.k_max}")
    lines.append(f"folds = {config.folds}")
    lines.append(f"bootstrap_b = {config.bootstrap_b}")
    if config.target_cv is not None:
        lines.append(f"target_cv = {config.target_cv!r}")
    lines.append(f"regenerate_population = {str(config.regenerate_population).lower()}")
    lines.append(f"replicates = {scenario.replicates}")
    lines.append(f"seed = {scenario.seed}")
    Path(path).write_text("\n".join(lines) + "\n")
