"""Procedural tiles for the desk-scale closed loop.

Real slide data is replaced by synthetic color textures with a fixed
palette: a smooth scalar pattern drives an interpolation between a pale
background and a dark stain color, so the green channel determines the full
color deterministically and an unpaired translator can learn the mapping.
The coherent domain is derived from the green channel by aperture-limited
imaging plus dust and speckle injection.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .optics import ArtifactConfig, inject_coherent_artifacts

# Palette endpoints (background, stain) roughly mimicking an H&E slide.
PALETTE_BG = np.array([0.96, 0.90, 0.95])
PALETTE_FG = np.array([0.36, 0.10, 0.45])

# Coherent degradation defaults: aperture cutoff at half Nyquist plus
# fine-grained speckle and sparse dust.  The screen cutoff is raised above
# the module default so speckle grains resolve on small demo tiles.
DEGRADE_CONFIG = ArtifactConfig(
    dust_density=0.25,
    speckle_amplitude=0.8,
    speckle_cutoff=0.5,
    na=0.25,
    wavelength=0.532,
    pixel_pitch=0.532,
)


def _pattern(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random scalar field in [0, 1] with blob and edge structure."""
    base = ndimage.gaussian_filter(rng.standard_normal((size, size)),
                                   sigma=float(rng.uniform(2.0, 5.0)), mode="wrap")
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    blobs = np.zeros((size, size))
    for _ in range(int(rng.integers(4, 10))):
        r0 = rng.uniform(0, size)
        c0 = rng.uniform(0, size)
        rad = rng.uniform(size / 16, size / 5)
        blobs += np.exp(-(((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * rad**2)))
    field = base / (np.abs(base).max() + 1e-12) + 0.8 * blobs / (blobs.max() + 1e-12)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def colorize(pattern: np.ndarray) -> np.ndarray:
    """Map a [0, 1] pattern through the fixed palette to a uint8 RGB tile."""
    rgb = PALETTE_BG[None, None, :] + pattern[..., None] * (PALETTE_FG - PALETTE_BG)[None, None, :]
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def generate_clean_tiles(count: int, size: int, seed: int) -> np.ndarray:
    """``(count, size, size, 3)`` uint8 color tiles, deterministic in seed."""
    if count < 1 or size < 16:
        raise ConfigurationError(f"need count >= 1 and size >= 16, got {count}, {size}")
    children = np.random.SeedSequence(seed).spawn(count)
    tiles = np.empty((count, size, size, 3), dtype=np.uint8)
    for i, child in enumerate(children):
        tiles[i] = colorize(_pattern(size, np.random.default_rng(child)))
    return tiles


def degrade_green(tile_rgb: np.ndarray, seed: int,
                  config: ArtifactConfig = DEGRADE_CONFIG) -> np.ndarray:
    """Coherently degraded single-channel version of a clean color tile.

    Takes the green plane as a field amplitude in [0, 1], injects dust and
    speckle, band-limits it coherently, and returns a uint8 grayscale image.
    """
    green = tile_rgb[:, :, 1].astype(np.float64) / 255.0
    degraded = inject_coherent_artifacts(green, seed, config)
    return np.clip(np.round(degraded * 255.0), 0, 255).astype(np.uint8)


def build_demo_tiles(
    n_train: int, n_holdout: int, size: int, seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unpaired training domains plus a paired held-out evaluation set.

    The first ``n_train`` clean tiles are split in half: the first half is
    degraded into domain A, the second half stays clean as domain B, so the
    two training sets share no content.  Returns ``(domain_a, domain_b,
    holdout_inputs, holdout_truth)`` with domain A and holdout inputs as
    uint8 grayscale and the rest as uint8 RGB.
    """
    if n_train < 2:
        raise ConfigurationError("need at least 2 training tiles to split")
    clean = generate_clean_tiles(n_train + n_holdout, size, seed)
    half = n_train // 2
    seeds = np.random.SeedSequence(seed + 1).generate_state(n_train + n_holdout)
    domain_a = np.stack(
        [degrade_green(clean[i], int(seeds[i])) for i in range(half)]
    )
    domain_b = clean[half:n_train]
    holdout_truth = clean[n_train:]
    holdout_inputs = np.stack(
        [degrade_green(clean[n_train + j], int(seeds[n_train + j])) for j in range(n_holdout)]
    ) if n_holdout else np.empty((0, size, size), dtype=np.uint8)
    return domain_a, domain_b, holdout_inputs, holdout_truth
