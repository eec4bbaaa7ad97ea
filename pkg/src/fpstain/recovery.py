"""Fourier ptychographic reconstruction.

Alternating-projection aperture synthesis: each capture constrains the
object spectrum inside one shifted pupil disk, the measured amplitudes are
enforced in image space, and the updates are stitched back into a common
high-resolution spectrum.  Optional embedded pupil recovery estimates the
objective aberration phase alongside the object; a defocus search wraps the
whole loop for post-acquisition refocusing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    ShapeError,
)
from .optics import (
    AcquisitionStack,
    ComplexField,
    IlluminationGeometry,
    PupilFunction,
    _block_bounds,
    defocus_pupil,
    spectrum_shift_bins,
)

INIT_MODES = ("mean-brightfield", "flat")


@dataclass
class ReconstructionConfig:
    """Settings for the aperture-synthesis loop.

    ``object_step`` and ``pupil_step`` are the usual ePIE relaxation factors
    in ``(0, 2]``.  ``upsample`` fixes the high-resolution grid at that
    multiple of the capture grid per axis; it must be large enough that the
    shifted passbands stay inside the recovered spectrum.
    """

    iterations: int = 10
    pupil_recovery: bool = False
    object_step: float = 1.0
    pupil_step: float = 1.0
    init_mode: str = "mean-brightfield"
    upsample: int = 4

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        for name, step in (("object_step", self.object_step), ("pupil_step", self.pupil_step)):
            if not 0.0 < step <= 2.0:
                raise ConfigurationError(f"{name} must lie in (0, 2], got {step}")
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(
                f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}"
            )
        if self.upsample < 1:
            raise ConfigurationError(f"upsample must be >= 1, got {self.upsample}")


@dataclass
class ReconstructionResult:
    """High-resolution complex object plus the pupil the loop settled on."""

    object: ComplexField
    recovered_pupil: PupilFunction
    residual_history: List[float] = field(default_factory=list)


def _check_single_channel(stack: AcquisitionStack) -> None:
    if not stack.captures:
        raise EmptyInputError("acquisition stack has no captures")
    channels = {cap.channel for cap in stack.captures}
    if len(channels) > 1:
        raise ConfigurationError(
            f"reconstruct expects a single-channel stack, got channels {sorted(channels)}"
        )


def _initial_spectrum(
    stack: AcquisitionStack, shape_hr: Tuple[int, int], up: int, mode: str, wavelength: float
) -> np.ndarray:
    """Seed spectrum: Fourier-upsampled mean bright-field amplitude.

    Falls back to a flat field at the stack's mean amplitude when no capture
    is bright-field (illumination NA within the objective NA) or when
    ``mode`` is ``"flat"``.
    """
    ch, cw = stack.captures[0].intensity.shape
    k0 = 2.0 * math.pi / wavelength
    bright = [
        cap.intensity
        for cap in stack.captures
        if math.hypot(*cap.k_illum) <= stack.objective_na * k0 * (1.0 + 1e-9)
    ]
    spectrum = np.zeros(shape_hr, dtype=np.complex128)
    if mode == "flat" or not bright:
        mean_amp = math.sqrt(float(np.mean([np.mean(c.intensity) for c in stack.captures])))
        spectrum[shape_hr[0] // 2, shape_hr[1] // 2] = mean_amp * shape_hr[0] * shape_hr[1]
        return spectrum
    amp = np.sqrt(np.mean(bright, axis=0))
    amp_spec = np.fft.fftshift(np.fft.fft2(amp)) * up * up
    r0 = shape_hr[0] // 2 - ch // 2
    c0 = shape_hr[1] // 2 - cw // 2
    spectrum[r0 : r0 + ch, c0 : c0 + cw] = amp_spec
    return spectrum


def reconstruct(
    stack: AcquisitionStack,
    geometry: IlluminationGeometry,
    pupil_init: PupilFunction,
    config: ReconstructionConfig,
) -> ReconstructionResult:
    """Recover a high-resolution complex field from one channel's captures.

    Captures are visited in ascending illumination-NA order.  For each one
    the current object spectrum is cropped at the capture's illumination
    wavevector, filtered by the pupil, transformed to image space, and its
    amplitude replaced by the measured square root intensity while keeping
    the phase; the difference is written back with the configured relaxation
    step.  With ``pupil_recovery`` the pupil receives the symmetric update
    and is re-masked to its NA support each visit.

    The returned ``residual_history`` holds one relative data-mismatch value
    per iteration, ``sqrt(sum (|g| - sqrt(I))^2 / sum I)``; it trends
    monotonically down on noiseless data.  The loop uses no randomness, so
    equal inputs give bit-identical results.
    """
    _check_single_channel(stack)
    shapes = {cap.intensity.shape for cap in stack.captures}
    if len(shapes) > 1:
        raise ShapeError(f"captures disagree on size: {sorted(shapes)}")
    (ch, cw) = shapes.pop()
    if pupil_init.shape != (ch, cw):
        raise ShapeError(
            f"pupil grid {pupil_init.shape} does not match capture size {(ch, cw)}"
        )

    up = config.upsample
    shape_hr = (ch * up, cw * up)
    pitch_hr = stack.capture_pitch / up
    wavelength = pupil_init.wavelength
    scale = (ch * cw) / (shape_hr[0] * shape_hr[1])

    order = sorted(
        range(len(stack.captures)),
        key=lambda i: (math.hypot(*stack.captures[i].k_illum), i),
    )
    spectrum = _initial_spectrum(stack, shape_hr, up, config.init_mode, wavelength)
    pupil_grid = pupil_init.grid.copy()
    support = pupil_init.support()

    measured_amp = [np.sqrt(cap.intensity) for cap in stack.captures]
    total_energy = float(sum(np.sum(cap.intensity) for cap in stack.captures))
    if total_energy <= 0:
        total_energy = 1.0

    residual_history: List[float] = []
    for _ in range(config.iterations):
        mismatch = 0.0
        for idx in order:
            cap = stack.captures[idx]
            shift = spectrum_shift_bins(cap.k_illum, shape_hr, pitch_hr)
            r0, r1, c0, c1 = _block_bounds(shift, shape_hr, (ch, cw))
            block = spectrum[r0:r1, c0:c1]
            g_spec = block * pupil_grid
            g = np.fft.ifft2(np.fft.ifftshift(g_spec)) * scale
            g_amp = np.abs(g)
            mismatch += float(np.sum((g_amp - measured_amp[idx]) ** 2))
            g_new = measured_amp[idx] * np.exp(1j * np.angle(g))
            g_spec_new = np.fft.fftshift(np.fft.fft2(g_new)) / scale
            delta = g_spec_new - g_spec
            block_old = block.copy()
            spectrum[r0:r1, c0:c1] = block + (
                config.object_step * np.conj(pupil_grid) * delta
            ) / np.max(np.abs(pupil_grid) ** 2)
            if config.pupil_recovery:
                pupil_grid = pupil_grid + (
                    config.pupil_step * np.conj(block_old) * delta
                ) / np.max(np.abs(block_old) ** 2)
                pupil_grid = np.where(support, pupil_grid, 0.0)
        residual_history.append(math.sqrt(mismatch / total_energy))

    obj_data = np.fft.ifft2(np.fft.ifftshift(spectrum))
    obj = ComplexField(obj_data, pixel_pitch=pitch_hr, wavelength=wavelength)
    pupil = PupilFunction(pupil_init.na, wavelength, pupil_init.pixel_pitch, pupil_grid)
    return ReconstructionResult(obj, pupil, residual_history)


def sharpness_figure(result: ReconstructionResult) -> float:
    """Focus quality of a reconstruction: inverse relative data mismatch.

    Spectral high-frequency energy of the recovered amplitude does not
    discriminate focus on synthesized apertures: a wrong defocus model
    shifts each sub-band copy instead of blurring it, which preserves (or
    inflates) high-frequency energy.  The data-mismatch residual, in
    contrast, is minimized exactly when the pupil model matches the
    acquisition, so its inverse serves as the sharpness score; this mirrors
    the common FPM practice of scoring a defocus search by solution
    convergence.
    """
    if not result.residual_history:
        return 0.0
    return 1.0 / max(result.residual_history[-1], 1e-12)


def digital_refocus(
    stack: AcquisitionStack,
    geometry: IlluminationGeometry,
    pupil: PupilFunction,
    config: ReconstructionConfig,
    dz_range: Tuple[float, float, float],
) -> Tuple[float, ReconstructionResult]:
    """Search a defocus range and keep the sharpest reconstruction.

    Runs the full reconstruction once per candidate ``dz`` with the pupil
    propagated by :func:`defocus_pupil`, scores each result with
    :func:`sharpness_figure`, and returns the winning ``dz`` and its
    result.  Exact sharpness ties resolve toward the smallest ``|dz|``.
    """
    lo, hi, step = dz_range
    if step <= 0:
        raise ConfigurationError(f"dz step must be > 0, got {step}")
    candidates = []
    dz = lo
    while dz <= hi + 1e-9:
        candidates.append(dz)
        dz += step
    if not candidates:
        raise ConfigurationError(f"empty defocus range {dz_range}")

    best: Tuple[float, ReconstructionResult, float] | None = None
    for dz in candidates:
        result = reconstruct(stack, geometry, defocus_pupil(pupil, dz), config)
        score = sharpness_figure(result)
        if best is None or score > best[2] or (score == best[2] and abs(dz) < abs(best[0])):
            best = (dz, result, score)
    return best[0], best[1]


def synthetic_na(geometry: IlluminationGeometry, objective_na: float) -> float:
    """Resolution limit of the synthesized aperture: objective NA plus the
    largest illumination NA the LED array reaches."""
    return objective_na + geometry.max_illumination_na()


def compose_color(results: Dict[str, ReconstructionResult]) -> np.ndarray:
    """Stack per-channel recovered intensities into an 8-bit RGB image.

    Intensities ``|amplitude|^2`` share one global normalization (the
    maximum over all three channels maps to 255), so equal channels give a
    neutral gray and a dark channel stays dark.
    """
    for ch in ("R", "G", "B"):
        if ch not in results:
            raise ConfigurationError(f"compose_color needs channel {ch!r}")
    intensities = [np.abs(results[ch].object.data) ** 2 for ch in ("R", "G", "B")]
    shapes = {arr.shape for arr in intensities}
    if len(shapes) > 1:
        raise ShapeError(f"channel dimensions differ: {sorted(shapes)}")
    peak = max(float(arr.max()) for arr in intensities)
    if peak <= 0:
        return np.zeros(intensities[0].shape + (3,), dtype=np.uint8)
    rgb = np.stack(intensities, axis=-1) / peak
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
