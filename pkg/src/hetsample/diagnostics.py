"""Reports comparing a selected subset with the full dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .feature_space import FeatureMatrix, GridPointSet
from .sampling import lattice_nearest_sq, nearest_selected_distances

DEFAULT_BINS = 20


@dataclass
class HistogramPair:
    feature_name: str
    bin_edges: np.ndarray
    full_freq: np.ndarray
    subset_freq: np.ndarray


def histogram_pair(full, subset, bins: int = DEFAULT_BINS, feature_name: str = "") -> HistogramPair:
    """Normalized histograms of a feature over the full data and over a subset.

    Both use equal-width bins spanning the full data's range. If the full data
    is constant, a single unit-width bin centred on the value is used.
    """
    full = np.asarray(full, dtype=np.float64).ravel()
    subset = np.asarray(subset, dtype=np.float64).ravel()
    if full.size == 0:
        raise ValueError("full data is empty")
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    lo, hi = full.min(), full.max()
    if lo == hi:
        edges = np.array([lo - 0.5, lo + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    full_counts, _ = np.histogram(full, bins=edges)
    subset_counts, _ = np.histogram(subset, bins=edges)
    if subset_counts.sum() == 0:
        raise ValueError("subset has no values inside the full data range")
    return HistogramPair(
        feature_name=feature_name,
        bin_edges=edges,
        full_freq=full_counts / full_counts.sum(),
        subset_freq=subset_counts / subset_counts.sum(),
    )


def shannon_entropy(freq) -> float:
    p = np.asarray(freq, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class PcaProjection:
    ids: list[str]
    components: np.ndarray
    explained_variance: np.ndarray
    coords: np.ndarray
    selected_flags: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.components + self.mean


def pca_project(matrix: FeatureMatrix, selected_ids: Sequence[str] = ()) -> PcaProjection:
    """Project onto the top-2 eigenvectors of the (population) covariance matrix.

    Each component is signed so that its largest-magnitude entry is positive.
    """
    x = matrix.values
    n, d = x.shape
    if n < 3 or d < 2:
        raise ValueError(f"PCA needs at least 3 samples and 2 features, got {n}x{d}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance matrix is not finite")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    components = evecs[:, order[:2]].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    selected = set(selected_ids)
    unknown = selected - set(matrix.ids)
    if unknown:
        raise KeyError(f"unknown selected id(s): {sorted(unknown)[:5]}")
    return PcaProjection(
        ids=list(matrix.ids),
        components=components,
        explained_variance=evals[:2].copy(),
        coords=centered @ components.T,
        selected_flags=np.array([i in selected for i in matrix.ids], dtype=bool),
        eigenvalues=evals,
        mean=mean,
    )


def coverage_report(selected, grid_points: GridPointSet, radius: float) -> dict:
    """FUS, nearest-distance quantiles and how many occupied cells lie near the selection."""
    distances = nearest_selected_distances(selected, grid_points)
    values = np.array([dist for _, dist in distances], dtype=np.float64)
    if values.size:
        q50, q90, q100 = (float(v) for v in np.quantile(values, [0.5, 0.9, 1.0]))
    else:
        q50 = q90 = q100 = 0.0
    cells = np.unique(grid_points.lattice, axis=0)
    chosen = grid_points.lattice[np.unique(np.asarray(selected, dtype=np.int64))]
    sq = lattice_nearest_sq(cells, np.unique(chosen, axis=0))
    return {
        "fus": q100,
        "distance_quantiles": {"50": q50, "90": q90, "100": q100},
        "n_unselected": int(values.size),
        "distinct_cells": int(len(cells)),
        "covered_cells": int(np.count_nonzero(sq <= math.floor(radius * radius))),
        "radius": float(radius),
    }


def pca_svg(projection: PcaProjection, width: int = 480, height: int = 480, margin: int = 40) -> str:
    """Static SVG scatter of the first two components, selected points drawn on top."""
    xy = projection.coords
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    px = margin + (xy[:, 0] - lo[0]) / span[0] * (width - 2 * margin)
    py = height - margin - (xy[:, 1] - lo[1]) / span[1] * (height - 2 * margin)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">PC1</text>',
        f'<text x="12" y="{height / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {height / 2:.1f})">PC2</text>',
        '<g fill="#8fb3d9" fill-opacity="0.5">',
    ]
    flags = projection.selected_flags
    lines += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2"/>' for x, y in zip(px[~flags], py[~flags])]
    lines.append('</g>\n<g fill="#d9480f" stroke="black" stroke-width="0.5">')
    lines += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4"/>' for x, y in zip(px[flags], py[flags])]
    lines.append("</g>\n</svg>")
    return "\n".join(lines) + "\n"
