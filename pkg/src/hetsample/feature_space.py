"""Mapped datasets, z-score normalization and grid discretization."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateFeatureSpace, InputError

logger = logging.getLogger(__name__)

STD_CONVENTION = "population"


@dataclass
class FeatureMatrix:
    """An ``n x d`` table of feature values, one row per sample.

    ``groups`` optionally tags each row with the identifier of the source it
    came from (e.g. the microscopy image a patch was cut out of).
    """

    ids: list[str]
    values: np.ndarray
    feature_names: list[str]
    groups: Optional[list[str]] = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"feature values must be 2-d, got shape {self.values.shape}")
        n, d = self.values.shape
        if len(self.ids) != n:
            raise InputError(f"{len(self.ids)} ids for {n} rows")
        if len(set(self.ids)) != n:
            raise InputError("sample ids are not unique")
        if len(self.feature_names) != d:
            raise InputError(f"{len(self.feature_names)} feature names for {d} columns")
        if self.groups is not None:
            self.groups = [str(g) for g in self.groups]
            if len(self.groups) != n:
                raise InputError(f"{len(self.groups)} groups for {n} rows")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise InputError(
                f"non-finite value for sample {self.ids[bad[0]]!r}, "
                f"feature {self.feature_names[bad[1]]!r}"
            )

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def select_features(self, names: Sequence[str]) -> "FeatureMatrix":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise InputError(f"unknown feature column(s): {', '.join(missing)}")
        cols = [self.feature_names.index(n) for n in names]
        return FeatureMatrix(list(self.ids), self.values[:, cols], list(names), self.groups)


@dataclass
class NormalizationModel:
    """Per-feature means and population standard deviations.

    Features whose variance is zero are listed in ``dropped_features`` (by
    column index into ``feature_names``) and removed when the model is applied.
    """

    feature_names: list[str]
    means: np.ndarray
    stds: np.ndarray
    dropped_features: list[int] = field(default_factory=list)

    @property
    def retained(self) -> list[int]:
        dropped = set(self.dropped_features)
        return [j for j in range(len(self.feature_names)) if j not in dropped]

    @property
    def retained_names(self) -> list[str]:
        return [self.feature_names[j] for j in self.retained]

    @property
    def dropped_names(self) -> list[str]:
        return [self.feature_names[j] for j in self.dropped_features]

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "dropped_features": self.dropped_names,
            "std_convention": STD_CONVENTION,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationModel":
        names = list(data["feature_names"])
        dropped = [names.index(n) for n in data.get("dropped_features", [])]
        return cls(names, np.asarray(data["means"], float), np.asarray(data["stds"], float), dropped)


@dataclass(frozen=True)
class GridConfig:
    """Grid cell size in normalized feature units."""

    cell_size: float

    def __post_init__(self):
        if not (self.cell_size > 0 and np.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be a positive finite number, got {self.cell_size}")


@dataclass
class GridPointSet:
    """Lattice coordinates of each sample plus the continuous coordinates they came from.

    ``scaled`` holds ``values / cell_size``; ``lattice`` is its elementwise floor.
    Row ``i`` corresponds to row ``i`` of the source :class:`FeatureMatrix`.
    """

    lattice: np.ndarray
    scaled: np.ndarray
    cell_size: float

    @property
    def n_samples(self) -> int:
        return self.lattice.shape[0]

    @property
    def dim(self) -> int:
        return self.lattice.shape[1]


def fit_zscore(matrix: FeatureMatrix) -> NormalizationModel:
    """Fit per-column means and population standard deviations.

    Zero-variance columns are dropped with a logged warning. Raises
    :class:`DegenerateFeatureSpace` when no column has any spread.
    """
    if matrix.n_samples < 2:
        raise DegenerateFeatureSpace("degenerate feature space: need at least 2 samples")
    means = matrix.values.mean(axis=0)
    stds = matrix.values.std(axis=0)
    dropped = [j for j in range(matrix.n_features) if not stds[j] > 0]
    for j in dropped:
        logger.warning("dropping zero-variance feature %r", matrix.feature_names[j])
    if len(dropped) == matrix.n_features:
        raise DegenerateFeatureSpace("degenerate feature space: every feature has zero variance")
    return NormalizationModel(list(matrix.feature_names), means, stds, dropped)


def apply_zscore(matrix: FeatureMatrix, model: NormalizationModel) -> FeatureMatrix:
    if list(matrix.feature_names) != list(model.feature_names):
        raise InputError(
            f"feature names {matrix.feature_names} do not match the model's {model.feature_names}"
        )
    keep = model.retained
    values = (matrix.values[:, keep] - model.means[keep]) / model.stds[keep]
    return FeatureMatrix(list(matrix.ids), values, model.retained_names, matrix.groups)


def inverse_zscore(matrix: FeatureMatrix, model: NormalizationModel) -> np.ndarray:
    """Map normalized values of the retained features back to original units."""
    keep = model.retained
    return matrix.values * model.stds[keep] + model.means[keep]


def discretize(matrix: FeatureMatrix, grid: GridConfig) -> GridPointSet:
    """Floor of ``values / cell_size``.

    Quotients within two ulps of an integer are snapped onto it first, so a
    lattice point multiplied back by the cell size lands in its own cell
    despite rounding in the division.
    """
    scaled = matrix.values / grid.cell_size
    nearest = np.rint(scaled)
    scaled = np.where(np.abs(scaled - nearest) <= 2 * np.spacing(np.abs(nearest)), nearest, scaled)
    lattice = np.floor(scaled).astype(np.int64)
    return GridPointSet(lattice=lattice, scaled=scaled, cell_size=grid.cell_size)


def _data_lines(fh):
    for line in fh:
        if not line.startswith("#"):
            yield line


def load_feature_csv(
    path: str | Path,
    group_column: Optional[str] = "group",
    feature_columns: Optional[Sequence[str]] = None,
    skip_column: str = "error",
) -> FeatureMatrix:
    """Read a feature CSV: ``id`` first, optional group column, then real features.

    Lines starting with ``#`` (metadata) are ignored. Rows carrying a non-empty
    ``skip_column`` value are left out with a warning; that column never counts
    as a feature.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(_data_lines(fh)))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty feature file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not header or header[0] != "id":
        raise InputError(f"{path}: first column must be 'id'")
    gcol = header.index(group_column) if group_column and group_column in header else None
    scol = header.index(skip_column) if skip_column in header else None
    if feature_columns is None:
        fcols = [j for j in range(1, len(header)) if j not in (gcol, scol)]
    else:
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise InputError(f"{path}: missing feature column(s) {', '.join(missing)}")
        fcols = [header.index(c) for c in feature_columns]
    if not fcols:
        raise InputError(f"{path}: no feature columns")

    ids, groups, values = [], [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if scol is not None and row[scol].strip():
            logger.warning("skipping %s: %s", row[0], row[scol])
            continue
        try:
            values.append([float(row[j]) for j in fcols])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
        ids.append(row[0])
        if gcol is not None:
            groups.append(row[gcol])
    if not ids:
        raise InputError(f"{path}: no usable rows")
    return FeatureMatrix(
        ids=ids,
        values=np.asarray(values, dtype=np.float64).reshape(len(ids), len(fcols)),
        feature_names=[header[j] for j in fcols],
        groups=groups if gcol is not None else None,
    )
