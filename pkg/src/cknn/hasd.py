"""Hassanat distance (HasD) between feature vectors.

The per-coordinate distance is a bounded ratio, so the metric needs no
feature scaling and can be applied directly to integer category codes.
For coordinates a, b:

    D(a, b) = 1 - (1 + min) / (1 + max)                     if min(a, b) >= 0
    D(a, b) = 1 - (1 + min + |min|) / (1 + max + |min|)     otherwise
    D(0, 0) = 0

and the vector distance is the arithmetic mean of D over the selected
coordinates. Each component lies in [0, 1], is symmetric, and satisfies
the triangle inequality (Hassanat 2014).

All pairwise routines accumulate components in ascending feature order and
divide by the mask size once, so the scalar and matrix paths produce
bit-identical values. Neighbour tie-breaking depends on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = ["FeatureMask", "hasd_component", "hasd_distance", "pairwise_hasd"]


@dataclass(frozen=True)
class FeatureMask:
    """Subset of feature columns used for distance computation.

    `included` is kept as a sorted tuple so masks are hashable, comparable
    lexicographically (grid-search tie order) and iterate deterministically.
    """

    included: tuple[int, ...]
    p: int = field(init=False)

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.included)))
        if not idx:
            raise DomainError("feature mask must include at least one feature")
        if idx[0] < 0:
            raise DomainError(f"feature indices must be non-negative, got {idx[0]}")
        object.__setattr__(self, "included", idx)
        object.__setattr__(self, "p", len(idx))

    def validate_against(self, p_max: int) -> None:
        if self.included[-1] >= p_max:
            raise DomainError(
                f"feature index {self.included[-1]} outside frame with p_max={p_max}"
            )

    def label(self) -> str:
        """Stable string form used in grid CSVs, e.g. ``0+2+3``."""
        return "+".join(str(i) for i in self.included)

    @classmethod
    def from_label(cls, label: str) -> "FeatureMask":
        try:
            return cls(tuple(int(tok) for tok in label.split("+")))
        except ValueError as exc:
            raise DomainError(f"cannot parse feature mask label {label!r}") from exc


def hasd_component(a: float, b: float) -> float:
    """Distance between two scalar coordinates, in [0, 1]."""
    a = float(a)
    b = float(b)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise DomainError(f"hasd_component requires finite inputs, got ({a}, {b})")
    if a == 0.0 and b == 0.0:
        return 0.0
    lo, hi = (a, b) if a <= b else (b, a)
    if lo >= 0.0:
        return 1.0 - (1.0 + lo) / (1.0 + hi)
    shift = -lo  # |min|, lifts both ends so the ratio stays in (0, 1]
    return 1.0 - (1.0 + lo + shift) / (1.0 + hi + shift)


def hasd_distance(x_i, x_j, mask: FeatureMask) -> float:
    """Mean component distance between two feature vectors over `mask`."""
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    if x_i.shape != x_j.shape:
        raise DomainError(f"vector shapes differ: {x_i.shape} vs {x_j.shape}")
    mask.validate_against(x_i.shape[-1])
    total = 0.0
    for l in mask.included:
        total += hasd_component(x_i[l], x_j[l])
    return total / mask.p


def _component_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Component distances for every pair of one coordinate: (len(a), len(b))."""
    lo = np.minimum.outer(a, b)
    hi = np.maximum.outer(a, b)
    shift = np.where(lo < 0.0, -lo, 0.0)
    out = 1.0 - (1.0 + lo + shift) / (1.0 + hi + shift)
    # 0/0 guard: both coordinates zero is defined as distance 0, and the
    # formula already yields 0 there, but enforce exactness for -0.0 inputs.
    out[(lo == 0.0) & (hi == 0.0)] = 0.0
    return out


def pairwise_hasd(
    targets: np.ndarray,
    donors: np.ndarray,
    mask: FeatureMask,
    chunk_rows: int = 2048,
) -> np.ndarray:
    """HasD between every target row and every donor row.

    Parameters
    ----------
    targets, donors : float arrays of shape (n_t, p_max) and (n_d, p_max).
    mask : feature subset; distances average over exactly these columns.
    chunk_rows : target rows processed per block, bounds peak memory.

    Returns
    -------
    (n_t, n_d) array of distances in [0, 1].
    """
    targets = np.asarray(targets, dtype=float)
    donors = np.asarray(donors, dtype=float)
    if targets.ndim != 2 or donors.ndim != 2 or targets.shape[1] != donors.shape[1]:
        raise DomainError(
            f"expected 2-d feature arrays with equal width, got {targets.shape} and {donors.shape}"
        )
    mask.validate_against(targets.shape[1])
    if not (np.all(np.isfinite(targets[:, mask.included])) and np.all(np.isfinite(donors[:, mask.included]))):
        raise DomainError("pairwise_hasd requires finite feature values")
    n_t, n_d = targets.shape[0], donors.shape[0]
    out = np.empty((n_t, n_d), dtype=float)
    for start in range(0, n_t, chunk_rows):
        stop = min(start + chunk_rows, n_t)
        acc = np.zeros((stop - start, n_d), dtype=float)
        # serial accumulation over features keeps this bit-identical to
        # hasd_distance regardless of mask size
        for l in mask.included:
            acc += _component_matrix(targets[start:stop, l], donors[:, l])
        out[start:stop] = acc / mask.p
    return out
