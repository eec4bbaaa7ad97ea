"""Dataset plumbing: tiling, stitching, file formats, and normalization.

Everything here is deliberately exact.  Tiling drops trailing partial rows
and columns so stitching is a bit-exact inverse; the CFLD container stores
float32 pairs verbatim; writers go through a temp-file-plus-rename so a
failed run leaves no partial outputs.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import (
    ConfigurationError,
    ConsistencyError,
    EmptyInputError,
    FormatError,
    RangeError,
    ShapeError,
    SizeError,
)
from .optics import AcquisitionStack, Capture, ComplexField

MIN_TILE_SIZE = 64
CFLD_MAGIC = b"CFD1"
_CFLD_HEADER = struct.Struct("<IIIdd")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write a file atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Tiling


@dataclass
class Tile:
    image: np.ndarray
    origin: Tuple[int, int]
    source_id: str = ""


@dataclass
class TileSet:
    """Non-overlapping grid tiles covering a (truncated) source image."""

    tiles: List[Tile]
    tile_size: int
    source_dims: Tuple[int, int]

    def __post_init__(self) -> None:
        if self.tile_size < MIN_TILE_SIZE:
            raise ConfigurationError(
                f"tile_size must be >= {MIN_TILE_SIZE}, got {self.tile_size}"
            )


def tile_image(image: np.ndarray, tile_size: int, source_id: str = "") -> TileSet:
    """Cut an image into a non-overlapping grid of ``tile_size`` squares.

    Trailing rows/columns that do not fill a whole tile are dropped; pad the
    source beforehand if full coverage matters.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ShapeError(f"expected a 2-D or 3-D image, got shape {image.shape}")
    h, w = image.shape[:2]
    if tile_size < MIN_TILE_SIZE:
        raise ConfigurationError(f"tile_size must be >= {MIN_TILE_SIZE}, got {tile_size}")
    if h < tile_size or w < tile_size:
        raise SizeError(f"image {image.shape[:2]} smaller than tile size {tile_size}")
    tiles = []
    for r in range(0, h - tile_size + 1, tile_size):
        for c in range(0, w - tile_size + 1, tile_size):
            tiles.append(Tile(image[r : r + tile_size, c : c + tile_size].copy(), (r, c), source_id))
    return TileSet(tiles, tile_size, (h, w))


def stitch_tiles(tileset: TileSet) -> np.ndarray:
    """Reassemble tiles at their recorded origins.

    The inverse of :func:`tile_image` on exact-multiple images; origins must
    form a complete grid with no duplicates.
    """
    if not tileset.tiles:
        raise EmptyInputError("tile set is empty")
    ts = tileset.tile_size
    origins = [t.origin for t in tileset.tiles]
    rows = sorted({o[0] for o in origins})
    cols = sorted({o[1] for o in origins})
    expected = {(r, c) for r in rows for c in cols}
    if rows != [i * ts for i in range(len(rows))] or cols != [i * ts for i in range(len(cols))]:
        raise ConsistencyError(f"origins are not on a {ts}-pixel grid: {sorted(origins)[:4]}...")
    if len(set(origins)) != len(origins):
        raise ConsistencyError("duplicate tile origins")
    if set(origins) != expected:
        raise ConsistencyError("tile origins do not cover the full grid")
    first = tileset.tiles[0].image
    out_shape = (len(rows) * ts, len(cols) * ts) + first.shape[2:]
    out = np.empty(out_shape, dtype=first.dtype)
    for tile in tileset.tiles:
        if tile.image.shape[:2] != (ts, ts):
            raise ConsistencyError(f"tile at {tile.origin} has shape {tile.image.shape}")
        r, c = tile.origin
        out[r : r + ts, c : c + ts] = tile.image
    return out


# ---------------------------------------------------------------------------
# CFLD complex-field container


def _cfld_bytes(fields: Sequence[ComplexField]) -> bytes:
    first = fields[0]
    for f in fields[1:]:
        if f.data.shape != first.data.shape:
            raise ShapeError("all channels in a CFLD file must share one shape")
    buf = io.BytesIO()
    buf.write(CFLD_MAGIC)
    buf.write(
        _CFLD_HEADER.pack(
            first.width, first.height, len(fields), first.pixel_pitch, first.wavelength
        )
    )
    for f in fields:
        interleaved = np.empty((f.height, f.width, 2), dtype="<f4")
        interleaved[..., 0] = f.data.real.astype(np.float32)
        interleaved[..., 1] = f.data.imag.astype(np.float32)
        buf.write(interleaved.tobytes())
    return buf.getvalue()


def write_cfld(fld: ComplexField, path: str | Path) -> None:
    """Write one complex field as a single-channel CFLD file."""
    atomic_write_bytes(path, _cfld_bytes([fld]))


def write_cfld_channels(fields: Sequence[ComplexField], path: str | Path) -> None:
    """Write several same-shaped fields as one multi-channel CFLD file."""
    if not fields:
        raise EmptyInputError("no fields to write")
    atomic_write_bytes(path, _cfld_bytes(fields))


def read_cfld_channels(path: str | Path) -> List[ComplexField]:
    """Read all channels of a CFLD file, validating magic and length."""
    raw = Path(path).read_bytes()
    if raw[:4] != CFLD_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    if len(raw) < 4 + _CFLD_HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    width, height, channels, pitch, wavelength = _CFLD_HEADER.unpack_from(raw, 4)
    if width < 1 or height < 1 or channels < 1:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}x{channels}")
    if pitch <= 0 or wavelength <= 0:
        raise FormatError(f"{path}: nonpositive pixel pitch or wavelength")
    offset = 4 + _CFLD_HEADER.size
    per_channel = height * width * 2 * 4
    expected = offset + channels * per_channel
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload truncated at offset {len(raw)}, expected {expected} bytes "
            f"for {channels} channel(s)"
        )
    out = []
    for ch in range(channels):
        start = offset + ch * per_channel
        flat = np.frombuffer(raw, dtype="<f4", count=height * width * 2, offset=start)
        pairs = flat.reshape(height, width, 2).astype(np.float64)
        out.append(ComplexField(pairs[..., 0] + 1j * pairs[..., 1], pitch, wavelength))
    return out


def read_cfld(path: str | Path) -> ComplexField:
    """Read a single-channel CFLD file."""
    fields = read_cfld_channels(path)
    if len(fields) != 1:
        raise FormatError(f"{path}: expected 1 channel, found {len(fields)}")
    return fields[0]


# ---------------------------------------------------------------------------
# Network-range normalization


def normalize_for_network(image: np.ndarray, kind: str) -> np.ndarray:
    """Map an image into the network's [-1, 1] input range.

    ``intensity8`` maps 0..255 linearly (``v / 127.5 - 1``); ``phase`` maps
    [-pi, pi] (``v / pi``) and rejects values outside that range.
    """
    image = np.asarray(image, dtype=np.float64)
    if kind == "intensity8":
        return image / 127.5 - 1.0
    if kind == "phase":
        if image.size and (image.min() < -math.pi or image.max() > math.pi):
            raise RangeError("phase values must lie within [-pi, pi]")
        return image / math.pi
    raise ConfigurationError(f"unknown normalization kind {kind!r}")


def denormalize_from_network(image: np.ndarray, kind: str) -> np.ndarray:
    """Exact inverse of :func:`normalize_for_network` (float output)."""
    image = np.asarray(image, dtype=np.float64)
    if kind == "intensity8":
        return (image + 1.0) * 127.5
    if kind == "phase":
        return image * math.pi
    raise ConfigurationError(f"unknown normalization kind {kind!r}")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Image files


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Save an 8-bit grayscale/RGB or 16-bit grayscale PNG atomically."""
    image = np.asarray(image)
    if image.dtype == np.uint16:
        if image.ndim != 2:
            raise ShapeError("16-bit PNGs must be single-channel")
        pil = Image.fromarray(image)
    elif image.dtype == np.uint8:
        pil = Image.fromarray(image)
    else:
        raise ConfigurationError(f"save_image expects uint8 or uint16, got {image.dtype}")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_image(path: str | Path) -> np.ndarray:
    """Load a PNG/JPEG image as uint8 (L or RGB) or uint16 (I;16) array."""
    with Image.open(path) as pil:
        if pil.mode in ("I;16", "I"):
            return np.asarray(pil, dtype=np.uint16)
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB") if len(pil.getbands()) >= 3 else pil.convert("L")
        return np.asarray(pil)


def image_channels(path: str | Path) -> int:
    with Image.open(path) as pil:
        if pil.mode in ("L", "I;16", "I"):
            return 1
        if pil.mode == "RGB":
            return 3
        raise ConfigurationError(f"{path}: unsupported image mode {pil.mode!r}")


def phase_to_uint8(phase: np.ndarray) -> np.ndarray:
    """Map phase values from [-pi, pi] onto the full 8-bit range."""
    return to_uint8((np.asarray(phase) + math.pi) / (2.0 * math.pi) * 255.0)


def amplitude_to_uint8(amplitude: np.ndarray) -> np.ndarray:
    amplitude = np.asarray(amplitude, dtype=np.float64)
    peak = amplitude.max()
    if peak <= 0:
        return np.zeros(amplitude.shape, dtype=np.uint8)
    return to_uint8(amplitude / peak * 255.0)


# ---------------------------------------------------------------------------
# Acquisition-stack persistence

_STACK_MANIFEST = "stack_manifest.txt"


def save_stack(stack: AcquisitionStack, directory: str | Path,
               channel_wavelengths: Dict[str, float] | None = None) -> None:
    """Persist a stack as 16-bit grayscale PNGs plus a UTF-8 manifest.

    One global intensity scale (recorded in the manifest) preserves relative
    energies between captures; per-pixel quantization is 16-bit.
    """
    if not stack.captures:
        raise EmptyInputError("cannot save an empty stack")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    peak = max(float(cap.intensity.max()) for cap in stack.captures)
    scale = peak if peak > 0 else 1.0
    lines = [
        "# fpstain acquisition stack",
        f"capture_pitch_um = {float(stack.capture_pitch)!r}",
        f"objective_na = {float(stack.objective_na)!r}",
        f"intensity_scale = {float(scale)!r}",
    ]
    for ch, wl in sorted((channel_wavelengths or {}).items()):
        lines.append(f"wavelength_{ch}_um = {float(wl)!r}")
    for i, cap in enumerate(stack.captures):
        name = f"capture_{i:05d}.png"
        quantized = np.round(cap.intensity / scale * 65535.0).astype(np.uint16)
        save_image(quantized, directory / name)
        kx, ky = cap.k_illum
        lines.append(f"{name} {cap.led_index} {cap.channel} {float(kx)!r} {float(ky)!r}")
    atomic_write_text(directory / _STACK_MANIFEST, "\n".join(lines) + "\n")


def load_stack(directory: str | Path) -> Tuple[AcquisitionStack, Dict[str, float]]:
    """Load a stack directory written by :func:`save_stack`."""
    directory = Path(directory)
    manifest = directory / _STACK_MANIFEST
    if not manifest.exists():
        raise FormatError(f"no stack manifest at {manifest}")
    headers: Dict[str, str] = {}
    captures: List[Capture] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " = " in line:
            key, value = line.split(" = ", 1)
            headers[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{manifest}: malformed capture line {line!r}")
        name, led_index, channel, kx, ky = parts
        scale = float(headers.get("intensity_scale", "1.0"))
        raw = load_image(directory / name).astype(np.float64)
        intensity = raw / 65535.0 * scale
        captures.append(Capture(intensity, (float(kx), float(ky)), channel, int(led_index)))
    if not captures:
        raise EmptyInputError(f"{manifest}: no captures listed")
    try:
        pitch = float(headers["capture_pitch_um"])
        na = float(headers["objective_na"])
    except KeyError as exc:
        raise FormatError(f"{manifest}: missing header {exc}") from exc
    wavelengths = {
        key[len("wavelength_") : -len("_um")]: float(val)
        for key, val in headers.items()
        if key.startswith("wavelength_") and key.endswith("_um")
    }
    return AcquisitionStack(captures, pitch, na), wavelengths


# ---------------------------------------------------------------------------
# Unpaired dataset manifests


@dataclass
class DatasetManifest:
    """Two unpaired file lists with per-domain channel counts."""

    domain_a_entries: List[Path]
    domain_b_entries: List[Path]
    domain_a_channels: int
    domain_b_channels: int


def _scan_domain(directory: Path, label: str) -> Tuple[List[Path], int]:
    if not directory.is_dir():
        raise ConfigurationError(f"{label} directory {directory} does not exist")
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        raise EmptyInputError(f"{label} directory {directory} contains no images")
    channels = image_channels(files[0])
    for f in files[1:]:
        c = image_channels(f)
        if c != channels:
            raise ConfigurationError(
                f"{label} mixes channel counts: {files[0].name} has {channels}, "
                f"{f.name} has {c}"
            )
    return files, channels


def build_dataset(dir_a: str | Path, dir_b: str | Path) -> DatasetManifest:
    """Validate two image directories into an unpaired dataset manifest.

    Entries are ordered lexicographically by filename; channel counts must
    be uniform within each domain but may differ between domains, and the
    two sides need not have equal length (no pairing exists).
    """
    a_files, a_channels = _scan_domain(Path(dir_a), "domain_a")
    b_files, b_channels = _scan_domain(Path(dir_b), "domain_b")
    return DatasetManifest(a_files, b_files, a_channels, b_channels)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write the manifest as text: section headers and one relative path per line."""
    path = Path(path)
    base = path.parent
    lines = ["[domain_a]"]
    lines += [os.path.relpath(p, base) for p in manifest.domain_a_entries]
    lines.append("[domain_b]")
    lines += [os.path.relpath(p, base) for p in manifest.domain_b_entries]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    sections: Dict[str, List[Path]] = {"domain_a": [], "domain_b": []}
    current = None
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise FormatError(f"{path}: unknown section {line}")
            continue
        if current is None:
            raise FormatError(f"{path}: entry before any section: {line!r}")
        sections[current].append(base / line)
    for name, entries in sections.items():
        if not entries:
            raise EmptyInputError(f"{path}: section [{name}] is empty")
    return DatasetManifest(
        sections["domain_a"],
        sections["domain_b"],
        image_channels(sections["domain_a"][0]),
        image_channels(sections["domain_b"][0]),
    )


# ---------------------------------------------------------------------------
# Tile-set persistence (for the tile/stitch commands)

_TILES_MANIFEST = "tiles_manifest.txt"


def save_tileset(tileset: TileSet, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "# fpstain tile set",
        f"tile_size = {tileset.tile_size}",
        f"source_height = {tileset.source_dims[0]}",
        f"source_width = {tileset.source_dims[1]}",
    ]
    for tile in tileset.tiles:
        r, c = tile.origin
        name = f"tile_r{r:06d}_c{c:06d}.png"
        save_image(tile.image, directory / name)
        lines.append(f"{name} {r} {c}")
    atomic_write_text(directory / _TILES_MANIFEST, "\n".join(lines) + "\n")


def load_tileset(directory: str | Path) -> TileSet:
    directory = Path(directory)
    manifest = directory / _TILES_MANIFEST
    if not manifest.exists():
        raise FormatError(f"no tile manifest at {manifest}")
    headers: Dict[str, str] = {}
    tiles: List[Tile] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " = " in line:
            key, value = line.split(" = ", 1)
            headers[key.strip()] = value.strip()
            continue
        name, r, c = line.split()
        tiles.append(Tile(load_image(directory / name), (int(r), int(c)), name))
    if not tiles:
        raise EmptyInputError(f"{manifest}: no tiles listed")
    return TileSet(
        tiles,
        int(headers["tile_size"]),
        (int(headers["source_height"]), int(headers["source_width"])),
    )
