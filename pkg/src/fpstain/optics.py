"""Coherent forward model for Fourier ptychographic image formation.

An LED array illuminates a thin sample from a set of incident angles.  Each
tilted plane wave shifts the sample spectrum, a low-NA objective pupil
low-pass filters it, and the camera records intensity.  The set of captures
samples overlapping circular regions of the object spectrum, which is what
the recovery module later stitches back together.

Conventions used throughout:

* Fields are 2-D complex arrays indexed ``[row, col]``; ``x`` runs along
  columns, ``y`` along rows.
* Lengths are micrometers unless a name says otherwise (LED coordinates are
  millimeters).
* Wavevectors ``(kx, ky)`` are angular, radians per micrometer.
* Spectra and pupil grids are centered: DC sits at ``(h // 2, w // 2)``.
* The capture of an illumination ``k`` is formed from the object-spectrum
  block centered at ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigurationError,
    OutOfBandError,
    ShapeError,
)

DEFAULT_CHANNEL_WAVELENGTHS_UM: Dict[str, float] = {
    "R": 0.632,
    "G": 0.532,
    "B": 0.472,
}

# Dust disk radii (pixels) and the speckle screen low-pass cutoff as a
# fraction of Nyquist.
DUST_RADIUS_RANGE_PX: Tuple[int, int] = (2, 6)
SPECKLE_CUTOFF_FRACTION: float = 1.0 / 16.0


@dataclass
class ComplexField:
    """A sampled 2-D complex optical field.

    Attributes:
        data: complex amplitude, shape ``(height, width)``.
        pixel_pitch: sample spacing in micrometers.
        wavelength: illumination wavelength in micrometers.
    """

    data: np.ndarray
    pixel_pitch: float
    wavelength: float

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"field data must be 2-D, got shape {self.data.shape}")
        if self.pixel_pitch <= 0:
            raise ConfigurationError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        if self.wavelength <= 0:
            raise ConfigurationError(f"wavelength must be > 0, got {self.wavelength}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def amplitude(self) -> np.ndarray:
        return np.abs(self.data)

    def phase(self) -> np.ndarray:
        return np.angle(self.data)


def _centered_freq_axes(shape: Tuple[int, int], pitch: float) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial-frequency axes (cycles/um) with DC at ``n // 2``."""
    fy = np.fft.fftshift(np.fft.fftfreq(shape[0], d=pitch))
    fx = np.fft.fftshift(np.fft.fftfreq(shape[1], d=pitch))
    return fy, fx


def _freq_radius(shape: Tuple[int, int], pitch: float) -> np.ndarray:
    fy, fx = _centered_freq_axes(shape, pitch)
    return np.hypot(fx[np.newaxis, :], fy[:, np.newaxis])


@dataclass
class PupilFunction:
    """Coherent transfer function of the objective on the capture grid.

    ``grid`` is complex with DC at the array center; its magnitude is zero
    strictly outside the circle of radius ``na / wavelength`` in spatial
    frequency.  The phase inside the support carries defocus and other
    aberrations.
    """

    na: float
    wavelength: float
    pixel_pitch: float
    grid: np.ndarray

    def __post_init__(self) -> None:
        if not 0 < self.na < 1:
            raise ConfigurationError(f"numerical aperture must lie in (0, 1), got {self.na}")
        if self.wavelength <= 0 or self.pixel_pitch <= 0:
            raise ConfigurationError("wavelength and pixel_pitch must be > 0")
        self.grid = np.asarray(self.grid, dtype=np.complex128)
        if self.grid.ndim != 2:
            raise ShapeError(f"pupil grid must be 2-D, got shape {self.grid.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def cutoff(self) -> float:
        """Cutoff radius in cycles per micrometer."""
        return self.na / self.wavelength

    def support(self) -> np.ndarray:
        """Boolean mask of the frequency samples inside the NA cutoff."""
        return _freq_radius(self.shape, self.pixel_pitch) <= self.cutoff

    def aberration_phase(self) -> np.ndarray:
        """Pupil phase in radians, zero outside the support."""
        return np.where(self.support(), np.angle(self.grid), 0.0)

    def with_wavelength(self, wavelength: float) -> "PupilFunction":
        """Rebuild this pupil for another illumination wavelength.

        The NA is a property of the objective, so the support radius scales
        as ``na / wavelength``.  Amplitude and aberration phase are carried
        over pointwise; frequency samples newly inside the support get unit
        amplitude and zero phase.
        """
        if wavelength == self.wavelength:
            return replace(self, grid=self.grid.copy())
        old_support = self.support()
        new_support = _freq_radius(self.shape, self.pixel_pitch) <= self.na / wavelength
        amplitude = np.where(old_support, np.abs(self.grid), 1.0)
        phase = np.where(old_support, np.angle(self.grid), 0.0)
        grid = np.where(new_support, amplitude * np.exp(1j * phase), 0.0)
        return PupilFunction(self.na, wavelength, self.pixel_pitch, grid)


def ideal_pupil(shape: Tuple[int, int], pixel_pitch: float, na: float, wavelength: float) -> PupilFunction:
    """Aberration-free circular pupil: unit amplitude inside the NA cutoff."""
    mask = _freq_radius(shape, pixel_pitch) <= na / wavelength
    return PupilFunction(na, wavelength, pixel_pitch, mask.astype(np.complex128))


def defocus_pupil(pupil: PupilFunction, dz: float) -> PupilFunction:
    """Propagate the pupil by ``dz`` micrometers along the optical axis.

    Multiplies the pupil by the angular-spectrum defocus factor
    ``exp(i * kz * dz)`` with ``kz = sqrt((2 pi / wavelength)^2 - kx^2 - ky^2)``
    inside the cutoff.  Amplitude and support are unchanged; ``dz`` may be
    negative.
    """
    k0 = 2.0 * math.pi / pupil.wavelength
    fy, fx = _centered_freq_axes(pupil.shape, pupil.pixel_pitch)
    kr2 = (2.0 * math.pi) ** 2 * (fx[np.newaxis, :] ** 2 + fy[:, np.newaxis] ** 2)
    kz = np.sqrt(np.maximum(k0**2 - kr2, 0.0))
    grid = pupil.grid * np.exp(1j * kz * dz)
    return replace(pupil, grid=grid)


@dataclass
class IlluminationGeometry:
    """LED-array geometry: positions in the array plane and its height.

    Attributes:
        led_positions_mm: ``(n, 2)`` array of ``(x, y)`` LED coordinates in
            millimeters, relative to the optical axis.
        array_height_mm: sample-to-array distance in millimeters.
        channel_wavelengths: map from channel label (``"R"``, ``"G"``,
            ``"B"``) to wavelength in micrometers.
    """

    led_positions_mm: np.ndarray
    array_height_mm: float
    channel_wavelengths: Dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CHANNEL_WAVELENGTHS_UM)
    )

    def __post_init__(self) -> None:
        self.led_positions_mm = np.asarray(self.led_positions_mm, dtype=np.float64)
        if self.led_positions_mm.ndim != 2 or self.led_positions_mm.shape[1] != 2:
            raise ShapeError("led_positions_mm must have shape (n, 2)")
        if self.led_positions_mm.shape[0] < 1:
            raise ConfigurationError("geometry needs at least one LED")
        if not np.all(np.isfinite(self.led_positions_mm)):
            raise ConfigurationError("LED positions must be finite")
        if self.array_height_mm <= 0:
            raise ConfigurationError(f"array height must be > 0, got {self.array_height_mm}")
        for name, wl in self.channel_wavelengths.items():
            if wl <= 0:
                raise ConfigurationError(f"wavelength for channel {name!r} must be > 0")

    @property
    def n_leds(self) -> int:
        return self.led_positions_mm.shape[0]

    def illumination_na(self, led_index: int) -> float:
        """NA of the plane wave from one LED: sin(atan(r / h))."""
        x, y = self.led_positions_mm[led_index]
        r = math.hypot(x, y)
        return math.sin(math.atan2(r, self.array_height_mm))

    def max_illumination_na(self) -> float:
        r = np.hypot(self.led_positions_mm[:, 0], self.led_positions_mm[:, 1])
        return math.sin(math.atan2(float(r.max()), self.array_height_mm))


def grid_geometry(
    rows: int = 15,
    cols: int = 15,
    pitch_mm: float = 4.0,
    height_mm: float = 80.0,
    channel_wavelengths: Optional[Dict[str, float]] = None,
) -> IlluminationGeometry:
    """Centered rectangular LED grid, row-major indexing.

    The defaults (15 x 15 LEDs, 4 mm pitch, 80 mm height) give a maximum
    illumination NA of about 0.44, i.e. a synthetic NA near 0.55 with a
    0.1-NA objective.
    """
    if rows < 1 or cols < 1:
        raise ConfigurationError("LED grid must have at least one row and column")
    ys = (np.arange(rows) - (rows - 1) / 2.0) * pitch_mm
    xs = (np.arange(cols) - (cols - 1) / 2.0) * pitch_mm
    gx, gy = np.meshgrid(xs, ys)
    positions = np.stack([gx.ravel(), gy.ravel()], axis=1)
    kwargs = {}
    if channel_wavelengths is not None:
        kwargs["channel_wavelengths"] = channel_wavelengths
    return IlluminationGeometry(positions, height_mm, **kwargs)


def illumination_wavevector(
    led_index: int, geometry: IlluminationGeometry, channel: str
) -> Tuple[float, float]:
    """Transverse wavevector ``(kx, ky)`` in rad/um for one LED and channel.

    For an LED at ``(x, y)`` and array height ``h`` the unit direction from
    LED to sample has transverse part ``(x, y) / sqrt(x^2 + y^2 + h^2)``,
    scaled by ``2 pi / wavelength``.  The magnitude is strictly below
    ``2 pi / wavelength`` for any finite LED position.
    """
    if not 0 <= led_index < geometry.n_leds:
        raise IndexError(f"led_index {led_index} out of range [0, {geometry.n_leds})")
    if channel not in geometry.channel_wavelengths:
        raise ConfigurationError(f"unknown channel {channel!r}")
    wavelength = geometry.channel_wavelengths[channel]
    x, y = geometry.led_positions_mm[led_index]
    h = geometry.array_height_mm
    norm = math.sqrt(x * x + y * y + h * h)
    k0 = 2.0 * math.pi / wavelength
    return (k0 * x / norm, k0 * y / norm)


@dataclass
class Capture:
    """One low-resolution intensity measurement."""

    intensity: np.ndarray
    k_illum: Tuple[float, float]
    channel: str
    led_index: int

    def __post_init__(self) -> None:
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.intensity.ndim != 2:
            raise ShapeError("capture intensity must be 2-D")
        if np.any(self.intensity < 0):
            raise ConfigurationError("capture intensity must be nonnegative")


@dataclass
class AcquisitionStack:
    """A set of captures sharing one camera grid and objective."""

    captures: List[Capture]
    capture_pitch: float
    objective_na: float

    @property
    def channels(self) -> List[str]:
        seen: List[str] = []
        for cap in self.captures:
            if cap.channel not in seen:
                seen.append(cap.channel)
        return seen

    def for_channel(self, channel: str) -> "AcquisitionStack":
        subset = [c for c in self.captures if c.channel == channel]
        return AcquisitionStack(subset, self.capture_pitch, self.objective_na)


def spectrum_shift_bins(
    k_illum: Tuple[float, float], shape: Tuple[int, int], pixel_pitch: float
) -> Tuple[int, int]:
    """Nearest-bin offset of an illumination wavevector on a spectrum grid.

    Rounds ``k / (2 pi)`` to the grid's frequency step ``1 / (n * pitch)``
    per axis; the sub-bin shift error this introduces is accepted.
    """
    kx, ky = k_illum
    row = round(ky / (2.0 * math.pi) * shape[0] * pixel_pitch)
    col = round(kx / (2.0 * math.pi) * shape[1] * pixel_pitch)
    return int(row), int(col)


def _block_bounds(
    center_shift: Tuple[int, int], full_shape: Tuple[int, int], block_shape: Tuple[int, int]
) -> Tuple[int, int, int, int]:
    """Row/col bounds of a block centered at DC + shift; errors if clipped."""
    r0 = full_shape[0] // 2 + center_shift[0] - block_shape[0] // 2
    c0 = full_shape[1] // 2 + center_shift[1] - block_shape[1] // 2
    r1, c1 = r0 + block_shape[0], c0 + block_shape[1]
    if r0 < 0 or c0 < 0 or r1 > full_shape[0] or c1 > full_shape[1]:
        raise OutOfBandError(
            f"passband block rows [{r0}, {r1}) cols [{c0}, {c1}) exceeds "
            f"object spectrum of shape {full_shape}; enlarge the object grid "
            f"or reduce the illumination angle"
        )
    return r0, r1, c0, c1


def simulate_capture(
    obj: ComplexField,
    pupil: PupilFunction,
    k_illum: Tuple[float, float],
    capture_size: Tuple[int, int],
) -> np.ndarray:
    """Coherent intensity capture under one tilted illumination.

    Extracts the ``capture_size`` block of the object spectrum centered at
    ``k_illum``, applies the pupil, and returns the squared magnitude of the
    inverse transform.  Amplitudes are scaled so a constant object of
    amplitude ``c`` yields intensity ``c**2`` under on-axis bright-field
    illumination.

    The object grid must share the capture grid's field of view:
    ``obj.pixel_pitch * obj.shape == capture_pitch * capture_size`` per axis,
    which makes the two spectra share one frequency step.
    """
    ch, cw = capture_size
    if pupil.shape != (ch, cw):
        raise ShapeError(f"pupil grid {pupil.shape} does not match capture size {capture_size}")
    if (
        obj.height % ch != 0
        or obj.width % cw != 0
        or obj.height // ch != obj.width // cw
    ):
        raise ShapeError(
            f"object grid {obj.data.shape} is not a uniform integer multiple "
            f"of the capture size {capture_size}"
        )
    fov_obj = obj.pixel_pitch * obj.height
    fov_cap = pupil.pixel_pitch * ch
    if not math.isclose(fov_obj, fov_cap, rel_tol=1e-9):
        raise ShapeError(
            f"object field of view {fov_obj:.6g} um differs from capture "
            f"field of view {fov_cap:.6g} um"
        )

    spectrum = np.fft.fftshift(np.fft.fft2(obj.data))
    shift = spectrum_shift_bins(k_illum, obj.data.shape, obj.pixel_pitch)
    r0, r1, c0, c1 = _block_bounds(shift, obj.data.shape, capture_size)
    block = spectrum[r0:r1, c0:c1] * pupil.grid
    # ifft2 already divides by (ch * cw); this factor makes a constant object
    # of amplitude c come out as a constant capture of amplitude c.
    scale = (ch * cw) / (obj.height * obj.width)
    field_lr = np.fft.ifft2(np.fft.ifftshift(block)) * scale
    return np.abs(field_lr) ** 2


def simulate_stack(
    objects: Dict[str, ComplexField],
    geometry: IlluminationGeometry,
    pupil: PupilFunction,
    channels: Sequence[str],
) -> AcquisitionStack:
    """Sequential acquisition: one capture per (channel, LED).

    ``pupil`` acts as a template; its support is rescaled per channel
    wavelength via :meth:`PupilFunction.with_wavelength`.  Channels are
    acquired in the given order with all LEDs per channel, so the capture
    count is ``len(channels) * n_leds``.
    """
    if not channels:
        raise ConfigurationError("at least one channel is required")
    for ch in channels:
        if ch not in objects:
            raise ConfigurationError(f"no object field provided for channel {ch!r}")
        if ch not in geometry.channel_wavelengths:
            raise ConfigurationError(f"geometry lacks a wavelength for channel {ch!r}")

    captures: List[Capture] = []
    capture_size = pupil.shape
    for ch in channels:
        wavelength = geometry.channel_wavelengths[ch]
        chan_pupil = pupil.with_wavelength(wavelength)
        obj = objects[ch]
        if not math.isclose(obj.wavelength, wavelength, rel_tol=1e-9):
            obj = replace(obj, wavelength=wavelength)
        for led in range(geometry.n_leds):
            k = illumination_wavevector(led, geometry, ch)
            intensity = simulate_capture(obj, chan_pupil, k, capture_size)
            captures.append(Capture(intensity, k, ch, led))
    return AcquisitionStack(captures, pupil.pixel_pitch, pupil.na)


@dataclass
class ArtifactConfig:
    """Knobs for synthetic coherent-artifact injection.

    ``dust_density`` is the expected disk count per 32 x 32 pixel cell and
    must lie in ``[0, 1)``.  ``speckle_amplitude`` is the RMS of the random
    smooth phase screen in radians and ``speckle_cutoff`` its low-pass
    cutoff as a fraction of Nyquist (default 1/16).  When ``na`` is set, the
    degraded field is coherently band-limited to ``na / wavelength`` on a
    grid of ``pixel_pitch``, which turns dust edges and the phase screen
    into the ringing and background ripple typical of coherent imagery.
    """

    dust_density: float = 0.0
    speckle_amplitude: float = 0.0
    speckle_cutoff: float = SPECKLE_CUTOFF_FRACTION
    na: Optional[float] = None
    wavelength: float = DEFAULT_CHANNEL_WAVELENGTHS_UM["G"]
    pixel_pitch: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.dust_density < 1.0:
            raise ConfigurationError(
                f"dust_density must lie in [0, 1), got {self.dust_density}"
            )
        if self.speckle_amplitude < 0:
            raise ConfigurationError("speckle_amplitude must be >= 0")
        if not 0.0 < self.speckle_cutoff <= 1.0:
            raise ConfigurationError("speckle_cutoff must lie in (0, 1]")


def dust_placements(
    shape: Tuple[int, int], density: float, rng: np.random.Generator
) -> List[Tuple[int, int, int]]:
    """Seeded dust-disk placements: ``round(density * n_cells)`` disks.

    ``n_cells`` counts whole 32 x 32 cells, ``(h // 32) * (w // 32)``.  Draw
    order per disk is row, column, then radius (integers, radius uniform in
    [2, 6]), so a test can replay the stream from the same generator state.
    """
    h, w = shape
    n_cells = (h // 32) * (w // 32)
    count = round(density * n_cells)
    lo, hi = DUST_RADIUS_RANGE_PX
    out = []
    for _ in range(count):
        row = int(rng.integers(0, h))
        col = int(rng.integers(0, w))
        radius = int(rng.integers(lo, hi + 1))
        out.append((row, col, radius))
    return out


def _speckle_screen(
    shape: Tuple[int, int], amplitude: float, cutoff: float, rng: np.random.Generator
) -> np.ndarray:
    """Smooth random phase screen: Gaussian noise low-passed at ``cutoff``
    (fraction of Nyquist) and rescaled to RMS ``amplitude``."""
    noise = rng.standard_normal(shape)
    # Gaussian low-pass whose frequency-domain sigma equals the cutoff.
    cutoff_cycles_per_px = cutoff * 0.5
    sigma_px = 1.0 / (2.0 * math.pi * cutoff_cycles_per_px)
    smooth = ndimage.gaussian_filter(noise, sigma=sigma_px, mode="wrap")
    rms = float(np.sqrt(np.mean(smooth**2)))
    if rms == 0.0:
        return np.zeros(shape)
    return smooth * (amplitude / rms)


def inject_coherent_artifacts(
    image: np.ndarray, seed: int, config: ArtifactConfig
) -> np.ndarray:
    """Degrade an image with synthetic coherent artifacts.

    Adds opaque dust disks and a multiplicative smooth phase screen, then
    band-limits the field by the configured aperture (when ``config.na`` is
    set) so both imprint the interference patterns coherent systems show.
    A real input is treated as a field amplitude and the degraded amplitude
    is returned; a complex input round-trips as a complex field.  The output
    is a pure function of ``(image, seed, config)``.
    """
    config.validate()
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ConfigurationError("input image must be finite")
    was_real = not np.iscomplexobj(image)
    fld = image.astype(np.complex128)

    rng = np.random.default_rng(seed)
    h, w = fld.shape
    if config.dust_density > 0:
        rows = np.arange(h)[:, None]
        cols = np.arange(w)[None, :]
        mask = np.ones((h, w))
        for r0, c0, radius in dust_placements((h, w), config.dust_density, rng):
            mask[(rows - r0) ** 2 + (cols - c0) ** 2 <= radius**2] = 0.0
        fld = fld * mask
    if config.speckle_amplitude > 0:
        screen = _speckle_screen((h, w), config.speckle_amplitude, config.speckle_cutoff, rng)
        fld = fld * np.exp(1j * screen)
    if config.na is not None:
        aperture = _freq_radius((h, w), config.pixel_pitch) <= config.na / config.wavelength
        fld = np.fft.ifft2(np.fft.ifftshift(np.fft.fftshift(np.fft.fft2(fld)) * aperture))

    return np.abs(fld) if was_real else fld
