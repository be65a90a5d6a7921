"""Spectral cube container, on-disk cube format, degradations and image export.

Cubes are held as ``(bands, rows, cols)`` arrays, i.e. band-major planar
order, which is also the payload order of the ``SCUB`` file format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"SCUB"
_HEADER = struct.Struct("<4sIII")


class CubeFormatError(ValueError):
    """Raised for malformed or inconsistent cube files."""


@dataclass(frozen=True)
class SpectralCube:
    """An ``M x N x L`` reflectance volume stored as a ``(L, M, N)`` array."""

    data: np.ndarray
    wavelengths_nm: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, rows, cols), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.wavelengths_nm is not None and len(self.wavelengths_nm) != data.shape[0]:
            raise ValueError("wavelength list length does not match band count")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(M, N, L)`` in the usual image-cube convention."""
        return self.rows, self.cols, self.bands

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class GrayImage:
    """Single-band image, ``(rows, cols)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"gray image must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def _as_array(cube) -> np.ndarray:
    return cube.data if isinstance(cube, SpectralCube) else np.asarray(cube)


def normalize_unit(data: np.ndarray) -> np.ndarray:
    """Scale a nonnegative array into ``[0, 1]`` by its global maximum."""
    data = np.asarray(data, dtype=np.float64)
    if data.min() < 0:
        data = data - data.min()
    peak = data.max()
    return data / peak if peak > 0 else data


def write_cube(cube, path) -> None:
    """Write a cube (``SpectralCube`` or ``(L, M, N)`` array) in ``SCUB`` format.

    Values are stored as little-endian float32. A JSON sidecar
    ``<file>.json`` is written when the cube carries wavelengths.
    """
    data = _as_array(cube)
    if data.ndim != 3:
        raise CubeFormatError(f"expected a 3-D cube, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise CubeFormatError("refusing to write non-finite values")
    bands, rows, cols = data.shape
    path = Path(path)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols, bands))
        fh.write(payload)
    wavelengths = getattr(cube, "wavelengths_nm", None)
    if wavelengths is not None:
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps({"wavelengths_nm": list(wavelengths)}))


def read_cube(path, normalize: bool = False) -> SpectralCube:
    """Read an ``SCUB`` file.

    Args:
        path: File to read.
        normalize: Rescale to ``[0, 1]`` by the global maximum (ingest of
            arbitrary-range data). Off by default so that round-trips are
            bit-exact.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"{path}: file shorter than the 16-byte header")
    magic, rows, cols, bands = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if min(rows, cols, bands) == 0:
        raise CubeFormatError(f"{path}: zero dimension in header ({rows}, {cols}, {bands})")
    expected = rows * cols * bands * 4
    got = len(raw) - _HEADER.size
    if got != expected:
        raise CubeFormatError(
            f"{path}: payload has {got} bytes, header {rows}x{cols}x{bands} needs {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(bands, rows, cols)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: payload contains non-finite values")
    data = data.astype(np.float32)
    if normalize:
        data = normalize_unit(data)
    wavelengths = None
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if "wavelengths_nm" in meta:
            wavelengths = tuple(float(w) for w in meta["wavelengths_nm"])
    return SpectralCube(data, wavelengths)


def spatial_decimate(cube, p: int) -> np.ndarray:
    """Average non-overlapping ``p x p`` pixel blocks in every band."""
    data = _as_array(cube)
    bands, rows, cols = data.shape
    if p < 1 or rows % p or cols % p:
        raise ValueError(f"spatial factor {p} does not divide {rows}x{cols}")
    return data.reshape(bands, rows // p, p, cols // p, p).mean(axis=(2, 4))


def spectral_decimate(cube, q: int) -> np.ndarray:
    """Average groups of ``q`` contiguous bands."""
    data = _as_array(cube)
    bands, rows, cols = data.shape
    if q < 1 or bands % q:
        raise ValueError(f"spectral factor {q} does not divide {bands} bands")
    return data.reshape(bands // q, q, rows, cols).mean(axis=1)


def _minmax_uint8(band: np.ndarray) -> np.ndarray:
    lo, hi = float(band.min()), float(band.max())
    if hi == lo:
        return np.zeros(band.shape, dtype=np.uint8)
    return np.round((band - lo) / (hi - lo) * 255.0).astype(np.uint8)


def rgb_composite(cube, band_r: int, band_g: int, band_b: int) -> np.ndarray:
    """Build an 8-bit ``(rows, cols, 3)`` composite from three bands.

    Each channel is min-max stretched to ``[0, 255]`` independently; a
    constant channel maps to 0.
    """
    data = _as_array(cube)
    idx = (band_r, band_g, band_b)
    for b in idx:
        if not 0 <= b < data.shape[0]:
            raise IndexError(f"band index {b} out of range for {data.shape[0]} bands")
    return np.stack([_minmax_uint8(data[b]) for b in idx], axis=-1)


def write_rgb(cube, path, bands=(0, 1, 2)) -> np.ndarray:
    """Write an RGB composite to PNG (or any Pillow-supported format)."""
    rgb = rgb_composite(cube, *bands)
    Image.fromarray(rgb, mode="RGB").save(path)
    return rgb


def read_gray(path) -> GrayImage:
    """Read a grayscale image (PNG/PGM/...) into ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return GrayImage(arr)


def write_gray(image, path) -> None:
    """Write a ``[0, 1]`` grayscale image as 8-bit, clipping out-of-range values."""
    data = image.data if isinstance(image, GrayImage) else np.asarray(image)
    arr = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
