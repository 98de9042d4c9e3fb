"""Image volumes and their on-disk format.

A `Volume` is an N-dimensional float array (2D slice or 3D volume), its
per-axis voxel spacing in millimetres, and a free-form metadata dict with
acquisition descriptors.  Volumes are stored as little-endian float32 raw
binary next to a JSON sidecar holding shape, spacing, and metadata.
"""

from __future__ import annotations

import gzip
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SIDECAR_SUFFIX = ".json"
RAW_SUFFIX = ".vol"


@dataclass
class Volume:
    """N-d numeric array plus voxel spacing (mm) and acquisition metadata."""

    data: np.ndarray
    spacing_mm: tuple[float, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != self.data.ndim:
            raise ValidationError(
                f"spacing has {len(self.spacing_mm)} entries for a "
                f"{self.data.ndim}-d array"
            )
        if any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"non-positive spacing {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def copy_with(self, data: np.ndarray, spacing_mm=None) -> "Volume":
        return Volume(
            data=data,
            spacing_mm=self.spacing_mm if spacing_mm is None else spacing_mm,
            meta=dict(self.meta),
        )


def save_volume(vol: Volume, path: str | Path) -> Path:
    """Write `<path>.vol` (little-endian float32) and `<path>.json`."""
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(vol.data, dtype="<f4")
    (path.with_suffix(RAW_SUFFIX)).write_bytes(raw.tobytes())
    sidecar = {
        "shape": list(vol.data.shape),
        "spacing_mm": list(vol.spacing_mm),
        "meta": vol.meta,
    }
    path.with_suffix(SIDECAR_SUFFIX).write_text(json.dumps(sidecar, sort_keys=True))
    return path.with_suffix(RAW_SUFFIX)


def load_volume(path: str | Path) -> Volume:
    """Load a raw+sidecar volume written by `save_volume`."""
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        path = path.with_suffix("")
    sidecar = json.loads(path.with_suffix(SIDECAR_SUFFIX).read_text())
    raw = path.with_suffix(RAW_SUFFIX).read_bytes()
    data = np.frombuffer(raw, dtype="<f4").reshape(sidecar["shape"]).copy()
    return Volume(data=data, spacing_mm=sidecar["spacing_mm"], meta=sidecar.get("meta", {}))


# --- minimal NIfTI-1 import -------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 256: np.int8, 512: np.uint16}


def load_nifti(path: str | Path) -> Volume:
    """Import a single-frame NIfTI-1 file (.nii or .nii.gz).

    Supports the common scalar dtypes and reads voxel spacing from pixdim.
    Only what the preprocessing chain needs; no orientation handling.
    """
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix == ".gz" or blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    if len(blob) < 352:
        raise ValidationError(f"{path}: too short for a NIfTI-1 header")
    sizeof_hdr = struct.unpack("<i", blob[:4])[0]
    endian = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack(">i", blob[:4])[0]
        if sizeof_hdr != 348:
            raise ValidationError(f"{path}: not a NIfTI-1 file")
        endian = ">"
    dim = struct.unpack(endian + "8h", blob[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ValidationError(f"{path}: bad ndim {ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise ValidationError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = int(struct.unpack(endian + "f", blob[108:112])[0])
    scl_slope = struct.unpack(endian + "f", blob[112:116])[0]
    scl_inter = struct.unpack(endian + "f", blob[116:120])[0]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    # NIfTI stores x fastest; reshape in Fortran order to keep (i, j, k) indexing
    data = np.asarray(data.reshape(shape, order="F"), dtype=np.float64)
    if scl_slope not in (0.0, 1.0):
        data = data * scl_slope + scl_inter
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1 : 1 + ndim])
    return Volume(data=data.astype(np.float32), spacing_mm=spacing, meta={"source": str(path)})


# --- PNG preview ------------------------------------------------------------


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write a 2D array as an 8-bit grayscale PNG (intensity-rescaled)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"PNG preview needs a 2D array, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    u8 = np.clip((img - lo) * scale, 0, 255).astype(np.uint8)
    h, w = u8.shape
    rows = b"".join(b"\x00" + u8[y].tobytes() for y in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    png = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(rows, 6))
        + chunk(b"IEND", b"")
    )
    Path(path).write_bytes(png)
