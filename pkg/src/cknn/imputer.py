"""Exact kNN donor search over the donor set D and imputed-value assembly.

Targets are the units in C minus D; donors are the sampled units missed by
the big data (D = A intersect C), which form a probability sample of C.
Search is a full scan: HasD is non-Euclidean, the donor pool is small, and
tie-breaking must be reproducible. Ties in distance are broken by ascending
donor unit id, so results are independent of execution order and thread
count.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import CapacityError, DomainError
from .frame import PopulationFrame
from .hasd import FeatureMask, pairwise_hasd

__all__ = [
    "NeighborSet",
    "DonorUsage",
    "ImputationResult",
    "find_neighbors",
    "impute_all",
    "loo_impute",
    "rank_totals",
    "uniform_weights",
]


def uniform_weights(k: int) -> np.ndarray:
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return np.full(k, 1.0 / k)


def _check_weights(w, k: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (k,):
        raise DomainError(f"weights must have length k={k}, got shape {w.shape}")
    if not np.isfinite(w).all() or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError("weights must be finite and sum to 1")
    return w


@dataclass(frozen=True)
class NeighborSet:
    """Ordered donors for one target, nearest first."""

    target_id: int
    donor_ids: tuple[int, ...]
    distances: tuple[float, ...]


@dataclass(frozen=True)
class DonorUsage:
    """Donor usage tallies n_km^(j)(i) and their weighted totals.

    counts[m-1, i, j] is the number of times donor i (in D order) served as
    the (j+1)-th nearest neighbour of a target in area m. K[m-1, i] is the
    weighted usage sum_j counts * w_j. Counts depend only on the neighbour
    sets; reweighting replaces K but never the counts.
    """

    donor_ids: np.ndarray
    counts: np.ndarray
    w: np.ndarray

    @property
    def K(self) -> np.ndarray:
        return self.counts @ self.w

    def with_weights(self, w) -> "DonorUsage":
        return DonorUsage(self.donor_ids, self.counts, _check_weights(w, self.counts.shape[2]))

    def usage_hash(self) -> str:
        """Fingerprint of counts and weighted usage; bootstrap must not alter it."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.counts).tobytes())
        h.update(np.ascontiguousarray(self.w).tobytes())
        h.update(np.ascontiguousarray(self.K).tobytes())
        return h.hexdigest()


def _ordered_neighbors(
    dist: np.ndarray, donor_ids: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k columns per row of `dist`, ties broken by ascending donor id."""
    ids = np.broadcast_to(donor_ids, dist.shape)
    order = np.lexsort((ids, dist), axis=-1)[:, :k]
    return order, np.take_along_axis(dist, order, axis=-1)


def find_neighbors(target, donor_pool, k: int, mask: FeatureMask) -> NeighborSet:
    """Exact k nearest donors for a single unit.

    `target` and the donor pool entries are UnitRecord-like objects with
    unit_id and features attributes.
    """
    donors = list(donor_pool)
    if len(donors) < k:
        raise CapacityError(f"donor pool has {len(donors)} units, need k={k}")
    donor_ids = np.array([d.unit_id for d in donors], dtype=np.int64)
    if target.unit_id in donor_ids:
        raise DomainError(f"target {target.unit_id} must not be in the donor pool")
    dist = pairwise_hasd(
        np.asarray(target.features, dtype=float)[None, :],
        np.array([d.features for d in donors], dtype=float),
        mask,
    )
    order, dists = _ordered_neighbors(dist, donor_ids, k)
    return NeighborSet(
        target_id=int(target.unit_id),
        donor_ids=tuple(int(i) for i in donor_ids[order[0]]),
        distances=tuple(float(v) for v in dists[0]),
    )


def _search_block(
    target_feats: np.ndarray,
    donor_feats: np.ndarray,
    donor_ids: np.ndarray,
    k: int,
    mask: FeatureMask,
    exclude_cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    dist = pairwise_hasd(target_feats, donor_feats, mask)
    if exclude_cols is not None:
        dist[np.arange(dist.shape[0]), exclude_cols] = np.inf
    return _ordered_neighbors(dist, donor_ids, k)


def _batched_search(
    target_feats, donor_feats, donor_ids, k, mask, n_threads=1, exclude_cols=None, block=2048
):
    n_t = target_feats.shape[0]
    nbr = np.empty((n_t, k), dtype=np.int64)
    nbr_dist = np.empty((n_t, k), dtype=float)
    spans = [(s, min(s + block, n_t)) for s in range(0, n_t, block)]

    def run(span):
        s, e = span
        excl = None if exclude_cols is None else exclude_cols[s:e]
        nbr[s:e], nbr_dist[s:e] = _search_block(
            target_feats[s:e], donor_feats, donor_ids, k, mask, excl
        )

    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return nbr, nbr_dist


@dataclass(frozen=True)
class ImputationResult:
    """Neighbour sets, imputed responses, and donor usage for a whole frame.

    `y_hat` is frame-length: observed y on D, weighted donor means on
    C minus D, NaN on B (big-data units need no imputation). Neighbour
    matrices are indexed by frame position.
    """

    k: int
    mask: FeatureMask
    w: np.ndarray
    target_pos: np.ndarray
    neighbor_pos: np.ndarray
    neighbor_dist: np.ndarray
    donor_pos: np.ndarray
    usage: DonorUsage
    y_hat: np.ndarray
    _frame: PopulationFrame

    def neighbor_set(self, target_id: int) -> NeighborSet:
        frame = self._frame
        tpos = frame.positions_of([target_id])[0]
        row = np.flatnonzero(self.target_pos == tpos)
        if row.size == 0:
            raise DomainError(f"unit {target_id} is not an imputation target")
        r = row[0]
        return NeighborSet(
            target_id=int(target_id),
            donor_ids=tuple(int(i) for i in frame.unit_id[self.neighbor_pos[r]]),
            distances=tuple(float(v) for v in self.neighbor_dist[r]),
        )

    def neighbor_y(self) -> np.ndarray:
        """(n_targets, k) donor responses in neighbour order."""
        return self._frame.y[self.neighbor_pos]

    def as_mapping(self) -> dict[int, float]:
        """target unit_id -> imputed (or observed, on D) response over C."""
        frame = self._frame
        return {
            int(frame.unit_id[p]): float(self.y_hat[p])
            for p in np.concatenate([frame.d_idx, self.target_pos])
        }

    def with_weights(self, w) -> "ImputationResult":
        """Reassemble imputed values under new donor weights.

        Neighbour sets and usage counts are fixed; only the weighted
        combination changes.
        """
        w = _check_weights(w, self.k)
        y_hat = self.y_hat.copy()
        y_hat[self.target_pos] = self.neighbor_y() @ w
        return replace(self, w=w, usage=self.usage.with_weights(w), y_hat=y_hat)


def impute_all(
    frame: PopulationFrame,
    k: int,
    mask: FeatureMask,
    w=None,
    n_threads: int = 1,
) -> ImputationResult:
    """Impute every unit of C: observed y on D, k-donor weighted mean elsewhere."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    mask.validate_against(frame.p_max)
    donor_pos = frame.d_idx
    if donor_pos.size < k:
        raise CapacityError(f"donor set D has {donor_pos.size} units, need k={k}")
    w = uniform_weights(k) if w is None else _check_weights(w, k)

    in_d = np.zeros(frame.n_units, dtype=bool)
    in_d[donor_pos] = True
    target_pos = np.flatnonzero(~frame.delta & ~in_d)

    donor_ids = frame.unit_id[donor_pos]
    nbr_local, nbr_dist = _batched_search(
        frame.features[target_pos],
        frame.features[donor_pos],
        donor_ids,
        k,
        mask,
        n_threads=n_threads,
    )
    neighbor_pos = donor_pos[nbr_local]

    counts = np.zeros((frame.n_areas, donor_pos.size, k), dtype=np.int64)
    t_area = frame.area_id[target_pos] - 1
    for j in range(k):
        np.add.at(counts[:, :, j], (t_area, nbr_local[:, j]), 1)

    y_hat = np.full(frame.n_units, np.nan)
    y_hat[donor_pos] = frame.y[donor_pos]
    y_hat[target_pos] = frame.y[neighbor_pos] @ w

    return ImputationResult(
        k=k,
        mask=mask,
        w=w,
        target_pos=target_pos,
        neighbor_pos=neighbor_pos,
        neighbor_dist=nbr_dist,
        donor_pos=donor_pos,
        usage=DonorUsage(donor_ids=donor_ids, counts=counts, w=w),
        y_hat=y_hat,
        _frame=frame,
    )


def loo_impute(
    frame: PopulationFrame,
    k: int,
    mask: FeatureMask,
    w=None,
    n_threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leave-one-out prediction for every donor in D.

    Each donor is predicted from its k nearest neighbours in D minus
    itself. Returns (y_hat over D, neighbour positions, distances), all in
    D order.
    """
    donor_pos = frame.d_idx
    if donor_pos.size <= k:
        raise CapacityError(
            f"leave-one-out needs |D| > k, got |D|={donor_pos.size}, k={k}"
        )
    w = uniform_weights(k) if w is None else _check_weights(w, k)
    feats = frame.features[donor_pos]
    donor_ids = frame.unit_id[donor_pos]
    nbr_local, nbr_dist = _batched_search(
        feats,
        feats,
        donor_ids,
        k,
        mask,
        n_threads=n_threads,
        exclude_cols=np.arange(donor_pos.size),
    )
    y_hat = frame.y[donor_pos[nbr_local]] @ w
    return y_hat, donor_pos[nbr_local], nbr_dist


def rank_totals(result: ImputationResult) -> np.ndarray:
    """Rank totals: the j-th entry sums the j-th-ranked donor response over all targets."""
    if result.target_pos.size == 0:
        return np.zeros(result.k)
    return result.neighbor_y().sum(axis=0)
