"""Structural similarity metrics and per-sample-type reporting.

Single-scale SSIM follows the standard Gaussian-window formulation (11 x 11,
sigma 1.5, k1 = 0.01, k2 = 0.03); statistics come from valid-mode filtering,
so a ``(window - 1) / 2`` border is excluded.  The multiscale variant
combines contrast-structure means across dyadic scales with the customary
exponents and adds the luminance term at the coarsest scale only; when asked
to score color images it looks exclusively at the green channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, ShapeError, SizeError

# Canonical five-scale exponents, renormalized to sum exactly to one (the
# published values add up to 1.0001).
_RAW_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
DEFAULT_SCALE_WEIGHTS: Tuple[float, ...] = tuple(_RAW_WEIGHTS / _RAW_WEIGHTS.sum())


@dataclass
class SsimParams:
    """Parameters shared by the single- and multi-scale metrics."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    scales: int = 5
    scale_weights: Tuple[float, ...] = DEFAULT_SCALE_WEIGHTS

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be > 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be > 0")
        if self.scales < 1 or len(self.scale_weights) != self.scales:
            raise ValueError(
                f"need one weight per scale: {self.scales} scales, "
                f"{len(self.scale_weights)} weights"
            )
        if abs(sum(self.scale_weights) - 1.0) > 1e-9:
            raise ValueError("scale_weights must sum to 1")


@dataclass
class SsimRow:
    sample_type: str
    n_tiles: int
    mean: float
    std: float


@dataclass
class SsimReport:
    """Per-sample-type mean and population std of per-tile SSIM."""

    rows: List[SsimRow] = field(default_factory=list)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation, cropped to the valid (fully overlapped) map."""
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    pad = (kernel.size - 1) // 2
    return out[pad : img.shape[0] - pad, pad : img.shape[1] - pad]


def _check_gray_pair(a: np.ndarray, b: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"expected 2-D grayscale images, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise SizeError(f"image {a.shape} smaller than the {window}-pixel window")
    return a.astype(np.float64), b.astype(np.float64)


def _luminance_contrast_structure(
    a: np.ndarray, b: np.ndarray, params: SsimParams
) -> Tuple[float, float]:
    """Mean luminance term and mean contrast-structure term over the image."""
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    kernel = _gaussian_kernel(params.window, params.sigma)
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum)), float(np.mean(cs))


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Mean local SSIM between two grayscale images.

    Symmetric in its arguments and exactly 1 for identical inputs.  The
    local statistics use a Gaussian window, and the map is averaged over the
    valid region only.
    """
    params = params or SsimParams()
    a, b = _check_gray_pair(np.asarray(a), np.asarray(b), params.window)
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    kernel = _gaussian_kernel(params.window, params.sigma)
    mu_a = _filter_valid(a, kernel)
    mu_b = _filter_valid(b, kernel)
    var_a = _filter_valid(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid(a * b, kernel) - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))


def extract_green(image: np.ndarray) -> np.ndarray:
    """Green plane of an RGB image; grayscale passes through unchanged."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image[:, :, 1]
    raise ShapeError(f"expected a 2-D or (h, w, 3) image, got shape {image.shape}")


def _downsample2(img: np.ndarray) -> np.ndarray:
    """2 x 2 mean pooling after trimming odd trailing rows/columns."""
    h, w = img.shape[0] - img.shape[0] % 2, img.shape[1] - img.shape[1] % 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def feasible_scales(shape: Tuple[int, int], window: int, requested: int) -> int:
    """Largest dyadic scale count whose coarsest level still fits the window."""
    m = requested
    while m > 1 and (min(shape) >> (m - 1)) < window:
        m -= 1
    return m


def ms_ssim_green(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Multiscale SSIM of the green channel.

    RGB inputs contribute only their green plane, so edits confined to red
    or blue change nothing.  Contrast-structure means are taken at every
    dyadic scale (clamped at zero so the result stays in ``[0, 1]`` for
    nonnegative inputs), luminance enters at the coarsest scale, and the
    per-scale exponents are the configured weights.  If the requested scale
    count would shrink below the window, the count is reduced and the
    remaining weights renormalized.
    """
    params = params or SsimParams()
    a = extract_green(np.asarray(a))
    b = extract_green(np.asarray(b))
    a, b = _check_gray_pair(a, b, params.window)

    m = feasible_scales(a.shape, params.window, params.scales)
    weights = np.asarray(params.scale_weights[:m], dtype=np.float64)
    weights = weights / weights.sum()

    result = 1.0
    for level in range(m):
        lum, cs = _luminance_contrast_structure(a, b, params)
        cs = max(cs, 0.0)
        if level == m - 1:
            result *= max(lum, 0.0) ** weights[level] * cs ** weights[level]
        else:
            result *= cs ** weights[level]
            a = _downsample2(a)
            b = _downsample2(b)
    return float(result)


def tile_report(
    groups: Sequence[Tuple[str, Sequence[Tuple[np.ndarray, np.ndarray]]]],
    params: SsimParams | None = None,
) -> SsimReport:
    """Per-sample-type SSIM table over tile pairs.

    Each group is ``(sample_type, [(prediction, truth), ...])``; color tiles
    are scored on their green channel.  Rows keep the given order and report
    the mean and population standard deviation of the per-tile SSIM values.
    """
    params = params or SsimParams()
    report = SsimReport()
    for sample_type, pairs in groups:
        if not pairs:
            raise EmptyInputError(f"sample type {sample_type!r} has no tile pairs")
        values = [
            ssim(extract_green(pred), extract_green(truth), params) for pred, truth in pairs
        ]
        arr = np.asarray(values, dtype=np.float64)
        report.rows.append(
            SsimRow(sample_type, len(values), float(arr.mean()), float(arr.std()))
        )
    return report


def report_to_csv(report: SsimReport) -> str:
    """Render a report as CSV with four decimal places per statistic."""
    lines = ["sample_type,n_tiles,mean_ssim,std_ssim"]
    for row in report.rows:
        lines.append(f"{row.sample_type},{row.n_tiles},{row.mean:.4f},{row.std:.4f}")
    return "\n".join(lines) + "\n"
