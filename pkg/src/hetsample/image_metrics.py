"""Per-image features computed from an intensity image and its vessel mask.

Images are 2-d float arrays indexed ``[row, col]``; masks are boolean arrays of
the same shape with ``True`` marking vessel (foreground) pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from skimage.morphology import thin

from .errors import MetricError

MAD_TO_SIGMA = 0.6745
MIN_NOISE_COEFFICIENTS = 100
METRIC_FIELDS = (
    "contrast",
    "noise_sigma",
    "vessel_density",
    "heterogeneity",
    "mean_medial_intensity",
    "detrended_heterogeneity",
)


def _check_pair(image: np.ndarray, mask: np.ndarray) -> None:
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")


def contrast(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean vessel intensity divided by mean background intensity."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(image, mask)
    if not mask.any():
        raise MetricError("undefined contrast: mask has no foreground pixels")
    if mask.all():
        raise MetricError("undefined contrast: mask has no background pixels")
    background = image[~mask].mean()
    if background == 0:
        raise MetricError("undefined contrast: background mean is zero")
    return float(image[mask].mean() / background)


def haar_diagonal(image: np.ndarray) -> np.ndarray:
    """Diagonal detail band of a one-level orthonormal 2-d Haar transform.

    An odd trailing row or column is dropped.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    x = image[:h, :w]
    return (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0


def noise_sigma(image: np.ndarray, mask: np.ndarray) -> float:
    """Robust Gaussian noise level estimated from background-only wavelet coefficients.

    ``median(|d|) / 0.6745`` over the Haar diagonal coefficients ``d`` whose
    2x2 support contains no foreground pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(image, mask)
    h, w = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    m = mask[:h, :w]
    clean = ~(m[0::2, 0::2] | m[0::2, 1::2] | m[1::2, 0::2] | m[1::2, 1::2])
    coeffs = haar_diagonal(image)[clean]
    if coeffs.size < MIN_NOISE_COEFFICIENTS:
        raise MetricError(
            f"insufficient background: {coeffs.size} usable wavelet coefficients "
            f"(need {MIN_NOISE_COEFFICIENTS})"
        )
    return float(np.median(np.abs(coeffs)) / MAD_TO_SIGMA)


@dataclass
class Skeleton:
    """One-pixel-wide medial lines of a mask."""

    mask: np.ndarray
    arc_length: float

    @property
    def pixels(self) -> np.ndarray:
        """``(x, y)`` coordinates of skeleton pixels."""
        rows, cols = np.nonzero(self.mask)
        return np.column_stack([cols, rows])

    def __len__(self) -> int:
        return int(self.mask.sum())


def arc_length(lines: np.ndarray) -> float:
    """Length of 8-connected pixel lines: 1 per axial and sqrt(2) per diagonal adjacency."""
    s = np.asarray(lines, dtype=bool)
    axial = np.count_nonzero(s[:, :-1] & s[:, 1:]) + np.count_nonzero(s[:-1, :] & s[1:, :])
    diagonal = np.count_nonzero(s[:-1, :-1] & s[1:, 1:]) + np.count_nonzero(s[:-1, 1:] & s[1:, :-1])
    return float(axial + math.sqrt(2) * diagonal)


def skeletonize(mask: np.ndarray) -> Skeleton:
    """Topology-preserving iterative thinning down to 8-connected medial lines."""
    mask = np.asarray(mask, dtype=bool)
    lines = thin(mask) if mask.any() else np.zeros_like(mask)
    return Skeleton(mask=lines, arc_length=arc_length(lines))


def vessel_density(skeleton: Skeleton, image_area: int) -> float:
    """Medial-line length per unit image area."""
    if image_area <= 0:
        raise ValueError(f"image area must be positive, got {image_area}")
    return skeleton.arc_length / image_area


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3 sigma), mirrored borders.

    Borders repeat the edge pixel (``d c b a | a b c d``).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    padded = np.pad(image, r, mode="symmetric")
    h, w = image.shape
    rows = np.zeros((h + 2 * r, w))
    for t, wt in enumerate(kernel):
        rows += wt * padded[:, t:t + w]
    out = np.zeros((h, w))
    for t, wt in enumerate(kernel):
        out += wt * rows[t:t + h, :]
    return out


def medial_heterogeneity(image: np.ndarray, skeleton: Skeleton, sigma: float = 1.0) -> tuple[float, float]:
    """Population std and mean of the blurred image sampled on the medial lines."""
    if not skeleton.mask.any():
        raise MetricError("no medial line")
    values = gaussian_blur(image, sigma)[skeleton.mask]
    return float(values.std()), float(values.mean())


@dataclass(frozen=True)
class DetrendModel:
    """Expected heterogeneity as a linear function of mean medial intensity."""

    slope: float
    intercept: float

    def expected(self, m: float) -> float:
        return self.slope * m + self.intercept


def fit_detrend(points: Sequence[tuple[float, float]]) -> DetrendModel:
    """Least-squares line through ``(m, h)`` pairs."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise MetricError("degenerate fit: need at least 2 points")
    m, h = pts[:, 0], pts[:, 1]
    dm = m - m.mean()
    ss = float(dm @ dm)
    if ss == 0:
        raise MetricError("degenerate fit: all mean intensities are equal")
    slope = float(dm @ (h - h.mean())) / ss
    return DetrendModel(slope=slope, intercept=float(h.mean() - slope * m.mean()))


def detrend(h: float, m: float, model: DetrendModel) -> float:
    return h - model.expected(m)


@dataclass
class MetricVector:
    contrast: Optional[float] = None
    noise_sigma: Optional[float] = None
    vessel_density: Optional[float] = None
    heterogeneity: Optional[float] = None
    mean_medial_intensity: Optional[float] = None
    detrended_heterogeneity: Optional[float] = None
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def extract_metrics(image: np.ndarray, mask: np.ndarray, blur_sigma: float = 1.0) -> MetricVector:
    """All per-image features; a failing feature is recorded in ``errors`` instead of raising.

    ``detrended_heterogeneity`` stays unset until :func:`detrend_metrics` runs
    over the whole dataset.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_pair(image, mask)
    out = MetricVector()
    for name, fn in (("contrast", contrast), ("noise_sigma", noise_sigma)):
        try:
            setattr(out, name, fn(image, mask))
        except MetricError as exc:
            out.errors[name] = str(exc)
    skeleton = skeletonize(mask)
    out.vessel_density = vessel_density(skeleton, image.size)
    try:
        out.heterogeneity, out.mean_medial_intensity = medial_heterogeneity(image, skeleton, blur_sigma)
    except MetricError as exc:
        out.errors["heterogeneity"] = str(exc)
    return out


def detrend_metrics(vectors: Sequence[MetricVector]) -> DetrendModel:
    """Fit the heterogeneity trend over every vector that has one and fill in the residuals."""
    usable = [v for v in vectors if v.heterogeneity is not None and v.mean_medial_intensity is not None]
    model = fit_detrend([(v.mean_medial_intensity, v.heterogeneity) for v in usable])
    for v in usable:
        v.detrended_heterogeneity = detrend(v.heterogeneity, v.mean_medial_intensity, model)
    return model
