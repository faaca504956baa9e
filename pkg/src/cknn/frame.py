"""Population data model: units, index-set algebra, and CSV ingestion.

A population U splits into the big-data stratum B (delta = 1) and its
complement C. A probability sample A with design weights overlaps both;
D = A intersect C is the donor set for imputation. Every estimator in the
package works off the index sets built here, per area and globally.

Frames are immutable after construction: all arrays are locked read-only,
and flag updates (big-data selection, sample draws) return new frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import SchemaError, ValidationError

__all__ = [
    "UnitRecord",
    "AreaSlice",
    "PopulationFrame",
    "load_frame",
    "save_frame",
    "partition_by_area",
    "DEFAULT_COLUMNS",
]

#: canonical CSV column names; feature columns follow as f1..fp
DEFAULT_COLUMNS = ("unit_id", "area_id", "delta", "in_sample", "design_weight", "y")


@dataclass(frozen=True)
class UnitRecord:
    """One population unit."""

    unit_id: int
    area_id: int
    features: tuple[float, ...]
    y: float
    delta: int
    in_sample: bool
    design_weight: float


@dataclass(frozen=True)
class AreaSlice:
    """Positional index sets for one small area.

    Positions index into the frame's column arrays, not unit ids.
    """

    area: int
    u_idx: np.ndarray
    b_idx: np.ndarray
    c_idx: np.ndarray
    a_idx: np.ndarray
    d_idx: np.ndarray
    c_minus_d_idx: np.ndarray

    @property
    def n_units(self) -> int:
        return self.u_idx.size

    @property
    def n_to_impute(self) -> int:
        return self.c_minus_d_idx.size


def _locked(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PopulationFrame:
    """Columnar population frame with derived index sets.

    `y` may be NaN for units outside B union A (their response is
    unobservable); it must be present on B and on A. `design_weight` is
    only meaningful (and validated) on sampled units.
    """

    unit_id: np.ndarray
    area_id: np.ndarray
    features: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    in_sample: np.ndarray
    design_weight: np.ndarray
    n_areas: int
    feature_names: tuple[str, ...]

    # derived, filled by from_arrays
    b_idx: np.ndarray = field(repr=False, default=None)
    c_idx: np.ndarray = field(repr=False, default=None)
    a_idx: np.ndarray = field(repr=False, default=None)
    d_idx: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_arrays(
        cls,
        unit_id,
        area_id,
        features,
        y,
        delta,
        in_sample,
        design_weight,
        n_areas: int | None = None,
        feature_names: tuple[str, ...] | None = None,
    ) -> "PopulationFrame":
        unit_id = np.asarray(unit_id, dtype=np.int64)
        area_id = np.asarray(area_id, dtype=np.int64)
        features = np.atleast_2d(np.asarray(features, dtype=float))
        y = np.asarray(y, dtype=float)
        delta = np.asarray(delta)
        in_sample = np.asarray(in_sample)
        design_weight = np.asarray(design_weight, dtype=float)

        n = unit_id.size
        for name, arr in (
            ("area_id", area_id),
            ("y", y),
            ("delta", delta),
            ("in_sample", in_sample),
            ("design_weight", design_weight),
        ):
            if arr.shape != (n,):
                raise SchemaError(f"column {name!r} has length {arr.shape}, expected ({n},)")
        if features.shape[0] != n:
            raise SchemaError(f"features have {features.shape[0]} rows, expected {n}")
        if features.shape[1] < 1:
            raise SchemaError("at least one feature column is required")

        if np.unique(unit_id).size != n:
            raise SchemaError("duplicate unit_id values")
        if not np.isin(delta, (0, 1)).all():
            raise ValidationError("delta must be 0/1 for every unit")
        if not np.isin(in_sample, (0, 1)).all():
            raise ValidationError("in_sample must be 0/1 for every unit")
        delta = delta.astype(bool)
        in_sample = in_sample.astype(bool)

        if n_areas is None:
            n_areas = int(area_id.max()) if n else 0
        if n and (area_id.min() < 1 or area_id.max() > n_areas):
            raise ValidationError(
                f"area_id outside 1..{n_areas}: range ({area_id.min()}, {area_id.max()})"
            )
        if not np.isfinite(features).all():
            raise ValidationError("feature values must be finite")

        observed = delta | in_sample
        if not np.isfinite(y[observed]).all():
            bad = unit_id[observed & ~np.isfinite(y)]
            raise ValidationError(
                f"y must be observed on the big data and the sample; missing for units {bad[:5].tolist()}"
            )
        w_s = design_weight[in_sample]
        if not (np.isfinite(w_s).all() and (w_s > 0).all()):
            raise ValidationError("design_weight must be finite and > 0 on sampled units")

        b_idx = np.flatnonzero(delta)
        c_idx = np.flatnonzero(~delta)
        a_idx = np.flatnonzero(in_sample)
        d_idx = np.flatnonzero(in_sample & ~delta)

        if feature_names is None:
            feature_names = tuple(f"f{j + 1}" for j in range(features.shape[1]))
        elif len(feature_names) != features.shape[1]:
            raise SchemaError("feature_names length does not match feature columns")

        return cls(
            unit_id=_locked(unit_id),
            area_id=_locked(area_id),
            features=_locked(features),
            y=_locked(y),
            delta=_locked(delta),
            in_sample=_locked(in_sample),
            design_weight=_locked(design_weight),
            n_areas=int(n_areas),
            feature_names=tuple(feature_names),
            b_idx=_locked(b_idx),
            c_idx=_locked(c_idx),
            a_idx=_locked(a_idx),
            d_idx=_locked(d_idx),
        )

    @classmethod
    def from_units(cls, units, n_areas: int | None = None) -> "PopulationFrame":
        units = list(units)
        return cls.from_arrays(
            unit_id=[u.unit_id for u in units],
            area_id=[u.area_id for u in units],
            features=[u.features for u in units],
            y=[u.y for u in units],
            delta=[u.delta for u in units],
            in_sample=[u.in_sample for u in units],
            design_weight=[u.design_weight for u in units],
            n_areas=n_areas,
        )

    # -- basic sizes ------------------------------------------------------

    @property
    def n_units(self) -> int:
        return self.unit_id.size

    @property
    def p_max(self) -> int:
        return self.features.shape[1]

    @property
    def n_sample(self) -> int:
        return self.a_idx.size

    def unit(self, pos: int) -> UnitRecord:
        return UnitRecord(
            unit_id=int(self.unit_id[pos]),
            area_id=int(self.area_id[pos]),
            features=tuple(self.features[pos]),
            y=float(self.y[pos]),
            delta=int(self.delta[pos]),
            in_sample=bool(self.in_sample[pos]),
            design_weight=float(self.design_weight[pos]),
        )

    def positions_of(self, unit_ids) -> np.ndarray:
        """Positions of the given unit ids (raises if any id is unknown)."""
        order = np.argsort(self.unit_id, kind="stable")
        found = np.searchsorted(self.unit_id, unit_ids, sorter=order)
        found = np.clip(found, 0, self.n_units - 1)
        pos = order[found]
        if not np.array_equal(self.unit_id[pos], np.asarray(unit_ids)):
            raise ValidationError("unknown unit_id in lookup")
        return pos

    def is_binary_response(self) -> bool:
        """True when every observed response is 0 or 1."""
        obs = self.y[self.delta | self.in_sample]
        return bool(np.isin(obs, (0.0, 1.0)).all())

    # -- derived frames ---------------------------------------------------

    def with_flags(
        self,
        delta: np.ndarray | None = None,
        in_sample: np.ndarray | None = None,
        design_weight: np.ndarray | None = None,
        y: np.ndarray | None = None,
    ) -> "PopulationFrame":
        """New frame with replaced flag/weight columns (same units)."""
        return PopulationFrame.from_arrays(
            unit_id=self.unit_id,
            area_id=self.area_id,
            features=self.features,
            y=self.y if y is None else y,
            delta=self.delta if delta is None else delta,
            in_sample=self.in_sample if in_sample is None else in_sample,
            design_weight=self.design_weight if design_weight is None else design_weight,
            n_areas=self.n_areas,
            feature_names=self.feature_names,
        )

    def mask_unobserved(self) -> "PopulationFrame":
        """Hide the response outside B union A, as an analyst would see it."""
        y = self.y.copy()
        y[~(self.delta | self.in_sample)] = np.nan
        return self.with_flags(y=y)

    def subset(self, keep: np.ndarray) -> "PopulationFrame":
        """New frame restricted to the units where `keep` is true."""
        keep = np.asarray(keep, dtype=bool)
        return PopulationFrame.from_arrays(
            unit_id=self.unit_id[keep],
            area_id=self.area_id[keep],
            features=self.features[keep],
            y=self.y[keep],
            delta=self.delta[keep],
            in_sample=self.in_sample[keep],
            design_weight=self.design_weight[keep],
            n_areas=self.n_areas,
            feature_names=self.feature_names,
        )


def partition_by_area(frame: PopulationFrame) -> dict[int, AreaSlice]:
    """Per-area index sets B_m, C_m, A_m, D_m and C_m minus D_m.

    Empty areas are legal and produce empty slices.
    """
    slices: dict[int, AreaSlice] = {}
    in_d = np.zeros(frame.n_units, dtype=bool)
    in_d[frame.d_idx] = True
    for m in range(1, frame.n_areas + 1):
        in_m = frame.area_id == m
        u_idx = np.flatnonzero(in_m)
        slices[m] = AreaSlice(
            area=m,
            u_idx=_locked(u_idx),
            b_idx=_locked(np.flatnonzero(in_m & frame.delta)),
            c_idx=_locked(np.flatnonzero(in_m & ~frame.delta)),
            a_idx=_locked(np.flatnonzero(in_m & frame.in_sample)),
            d_idx=_locked(np.flatnonzero(in_m & in_d)),
            c_minus_d_idx=_locked(np.flatnonzero(in_m & ~frame.delta & ~in_d)),
        )
    return slices


def load_frame(
    path: str | Path,
    schema: dict | None = None,
    n_areas: int | None = None,
) -> PopulationFrame:
    """Load a delimiter-separated frame with a header row.

    `schema` maps logical names (unit_id, area_id, delta, in_sample,
    design_weight, y, features) to file column names; `features` is a list.
    Without a schema the canonical names are required and every remaining
    column, in file order, is a feature.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"schema error: input file not found: {path}")
    try:
        df = pd.read_csv(path, sep=None, engine="python")
    except Exception as exc:
        raise SchemaError(f"cannot parse {path}: {exc}") from exc

    schema = dict(schema or {})
    colmap = {name: schema.get(name, name) for name in DEFAULT_COLUMNS}
    missing = [c for c in colmap.values() if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required columns: {missing}")
    feature_cols = schema.get("features")
    if feature_cols is None:
        feature_cols = [c for c in df.columns if c not in set(colmap.values())]
    else:
        feature_cols = list(feature_cols)
        absent = [c for c in feature_cols if c not in df.columns]
        if absent:
            raise SchemaError(f"missing feature columns: {absent}")
    if not feature_cols:
        raise SchemaError("no feature columns found")

    def col(name, dtype=None):
        vals = df[colmap[name]].to_numpy()
        return vals if dtype is None else vals.astype(dtype)

    try:
        unit_id = col("unit_id", np.int64)
        area_id = col("area_id", np.int64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"unit_id/area_id must be integers: {exc}") from exc

    for flag in ("delta", "in_sample"):
        vals = df[colmap[flag]].to_numpy()
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError(f"column {colmap[flag]!r} must be binary 0/1")

    return PopulationFrame.from_arrays(
        unit_id=unit_id,
        area_id=area_id,
        features=df[feature_cols].to_numpy(dtype=float),
        y=col("y", float),
        delta=col("delta", np.int64),
        in_sample=col("in_sample", np.int64),
        design_weight=col("design_weight", float),
        n_areas=n_areas,
        feature_names=tuple(feature_cols),
    )


def save_frame(frame: PopulationFrame, path: str | Path) -> None:
    """Write the canonical CSV schema; floats keep full round-trip precision."""
    df = pd.DataFrame(
        {
            "unit_id": frame.unit_id,
            "area_id": frame.area_id,
            "delta": frame.delta.astype(np.int64),
            "in_sample": frame.in_sample.astype(np.int64),
            "design_weight": frame.design_weight,
            "y": frame.y,
        }
    )
    for j, name in enumerate(frame.feature_names):
        df[name] = frame.features[:, j]
    df.to_csv(path, index=False)
