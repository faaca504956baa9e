"""Cross-validated choice of k and the HasD feature subset.

K-fold cross-validation runs over the donor set D only. Held-out donors
are predicted from the remaining folds with unweighted k-neighbour votes
(calibration weights play no role during tuning). The loss is a signed
classification error (+1 false positive, -1 false negative) netted within
each (fold, area) cell before taking absolute values, so offsetting errors
inside an area cancel while cross-area errors do not.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, DomainError
from .frame import PopulationFrame
from .hasd import FeatureMask, pairwise_hasd

__all__ = [
    "FoldAssignment",
    "GridPoint",
    "GridSearchResult",
    "assign_folds",
    "cv_objective",
    "grid_search",
    "all_feature_subsets",
    "write_grid_csv",
]

DEFAULT_FOLDS = 5
DEFAULT_K_MAX = 20
CLASSIFICATION_THRESHOLD = 0.5


@dataclass(frozen=True)
class FoldAssignment:
    """Random balanced partition of the donor set D.

    `rho` holds fold labels 1..n_folds aligned with D order (frame.d_idx).
    Fold sizes differ by at most one.
    """

    rho: np.ndarray
    n_folds: int
    seed: int | None

    def fold_positions(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.rho == j)


def assign_folds(n_d: int, n_folds: int = DEFAULT_FOLDS, seed: int | None = None) -> FoldAssignment:
    """Assign |D| donors to balanced folds uniformly at random."""
    if n_folds < 2:
        raise DomainError(f"need at least 2 folds, got {n_folds}")
    if n_d < n_folds:
        raise CapacityError(f"cannot split {n_d} donors into {n_folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_d)
    rho = np.empty(n_d, dtype=np.int64)
    base, extra = divmod(n_d, n_folds)
    start = 0
    for j in range(1, n_folds + 1):
        size = base + (1 if j <= extra else 0)
        rho[perm[start : start + size]] = j
        start += size
    return FoldAssignment(rho=rho, n_folds=n_folds, seed=seed)


def _fold_losses(
    frame: PopulationFrame,
    mask: FeatureMask,
    folds: FoldAssignment,
    k_values: tuple[int, ...],
) -> dict[int, float]:
    """Netted CV objective for one feature subset over a grid of k.

    The per-fold donor ordering is computed once; prefix sums of the
    ordered donor responses then give every k at no extra search cost.
    Neighbour votes are unweighted means (exact dyadic rationals for a
    binary response, so the 0.5 threshold comparison is exact).
    """
    d_pos = frame.d_idx
    n_d = d_pos.size
    if folds.rho.shape != (n_d,):
        raise DomainError("fold assignment is not aligned with the donor set")
    k_max = max(k_values)
    feats = frame.features[d_pos]
    y_d = frame.y[d_pos]
    ids_d = frame.unit_id[d_pos]
    areas_d = frame.area_id[d_pos] - 1
    totals = {k: 0.0 for k in k_values}
    for j in range(1, folds.n_folds + 1):
        test = folds.rho == j
        train = ~test
        n_train = int(train.sum())
        if n_train < k_max:
            raise CapacityError(
                f"fold {j} leaves {n_train} donors, need k={k_max}"
            )
        dist = pairwise_hasd(feats[test], feats[train], mask)
        ids_train = np.broadcast_to(ids_d[train], dist.shape)
        order = np.lexsort((ids_train, dist), axis=-1)[:, :k_max]
        ordered_y = y_d[train][order]
        prefix = np.cumsum(ordered_y, axis=1)
        y_test = y_d[test]
        area_test = areas_d[test]
        for k in k_values:
            # vote > 0.5 predicts class 1; an exact tie predicts class 0.
            pred = prefix[:, k - 1] > CLASSIFICATION_THRESHOLD * k
            signed = pred.astype(np.int64) - y_test.astype(np.int64)
            nets = np.zeros(frame.n_areas, dtype=np.int64)
            np.add.at(nets, area_test, signed)
            totals[k] += float(np.abs(nets).sum())
    return {k: totals[k] / n_d for k in k_values}


def cv_objective(
    frame: PopulationFrame,
    k: int,
    mask: FeatureMask,
    folds: FoldAssignment,
    loss: str = "net_binary",
) -> float:
    """Cross-validated test error for one (k, feature subset) pair."""
    if loss == "squared_error":
        raise NotImplementedError(
            "squared-error CV for continuous responses is declared but not "
            "yet implemented; only net_binary is available"
        )
    if loss != "net_binary":
        raise DomainError(f"unknown loss {loss!r}")
    if not frame.is_binary_response():
        raise DomainError("net_binary loss requires a binary response")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    mask.validate_against(frame.p_max)
    return _fold_losses(frame, mask, folds, (k,))[k]


def all_feature_subsets(p: int) -> list[FeatureMask]:
    """Every non-empty feature subset, in binary counting order.

    Subset v (v = 1..2^p - 1) includes feature j when bit j of v is set,
    so the sequence for p = 2 is {0}, {1}, {0,1}.
    """
    if p < 1:
        raise DomainError(f"need at least one feature, got p={p}")
    subsets = []
    for v in range(1, 2**p):
        included = tuple(j for j in range(p) if v >> j & 1)
        subsets.append(FeatureMask(included))
    return subsets


@dataclass(frozen=True)
class GridPoint:
    """One (k, feature subset) candidate and its CV test error."""

    k: int
    mask: FeatureMask
    test_error: float


@dataclass(frozen=True)
class GridSearchResult:
    best: GridPoint
    table: tuple[GridPoint, ...]
    folds: FoldAssignment


def grid_search(
    frame: PopulationFrame,
    k_range=None,
    feature_subsets="all",
    n_folds: int = DEFAULT_FOLDS,
    seed: int | None = None,
    n_threads: int = 1,
) -> GridSearchResult:
    """Exhaustive CV search over k and feature subsets.

    All grid points share one fold assignment so their errors are
    comparable. Ties are broken toward smaller k, then the
    lexicographically smaller subset.
    """
    if k_range is None:
        k_range = range(1, DEFAULT_K_MAX + 1)
    k_values = tuple(int(k) for k in k_range)
    if len(k_values) == 0 or min(k_values) < 1:
        raise DomainError("k_range must contain positive integers")
    if feature_subsets == "all":
        masks = all_feature_subsets(frame.p_max)
    else:
        masks = [m if isinstance(m, FeatureMask) else FeatureMask(tuple(m)) for m in feature_subsets]
        if not masks:
            raise DomainError("feature_subsets must be non-empty")
        for m in masks:
            m.validate_against(frame.p_max)
    if not frame.is_binary_response():
        raise DomainError("grid search requires a binary response")

    folds = assign_folds(frame.d_idx.size, n_folds, seed)
    results: list[dict[int, float]] = [None] * len(masks)

    def run(idx: int) -> None:
        results[idx] = _fold_losses(frame, masks[idx], folds, k_values)

    if n_threads > 1 and len(masks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run, range(len(masks))))
    else:
        for idx in range(len(masks)):
            run(idx)

    table = []
    for mask, by_k in zip(masks, results):
        for k in k_values:
            table.append(GridPoint(k=k, mask=mask, test_error=by_k[k]))
    best = min(table, key=lambda g: (g.test_error, g.k, g.mask.included))
    return GridSearchResult(best=best, table=tuple(table), folds=folds)


def write_grid_csv(result: GridSearchResult, path) -> None:
    """Write the full CV grid, one row per (k, subset) candidate."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "mask", "test_error_rate"])
        for point in result.table:
            writer.writerow([point.k, point.mask.label(), repr(point.test_error)])
