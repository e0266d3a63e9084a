"""Core volume/field types, intensity normalization, and file I/O.

Conventions used throughout the package:

* Volumes are ``numpy`` arrays of shape ``(nx, ny, nz)`` indexed ``[x, y, z]``
  and held as float64 in memory.
* On disk (both supported formats) voxels are serialized x-fastest, so voxel
  ``(x, y, z)`` sits at flat index ``x + nx * (y + ny * z)``.  This matches the
  NIfTI-1 payload layout.
* Displacement fields are shaped ``(nx, ny, nz, 3)`` and are expressed in
  voxel units of the moving image grid (not millimetres).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Volume3D",
    "DisplacementField",
    "NormalizationSpec",
    "FormatError",
    "normalize_intensities",
    "read_volume",
    "write_volume",
    "downsample",
]


class FormatError(Exception):
    """Raised for malformed or unsupported volume files."""


@dataclass
class Volume3D:
    """A scalar 3-D image: intensity grid plus voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3-D with positive dims, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume intensities must be finite")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")
        self.data = arr
        self.spacing = sp

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass
class DisplacementField:
    """Per-voxel 3-vector field in voxel units of the moving grid."""

    vectors: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if arr.ndim != 4 or arr.shape[3] != 3 or min(arr.shape[:3]) < 1:
            raise ValueError(f"field must have shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field components must be finite")
        self.vectors = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims) -> "DisplacementField":
        nx, ny, nz = dims
        return cls(np.zeros((nx, ny, nz, 3)))


@dataclass
class NormalizationSpec:
    """Clamp-and-rescale recipe mapping raw intensities to [0, 1].

    If ``min_intensity``/``max_intensity`` are given they are used as the clamp
    bounds directly; otherwise the bounds come from ``clamp_percentiles`` of
    the input volume.  The (0.5, 99.5) default absorbs the bright outliers
    common in MR magnitude images.
    """

    min_intensity: float | None = None
    max_intensity: float | None = None
    clamp_percentiles: tuple[float, float] = (0.5, 99.5)

    def __post_init__(self):
        lo, hi = self.clamp_percentiles
        if not (0.0 <= lo < hi <= 100.0):
            raise ValueError(f"percentiles must satisfy 0 <= low < high <= 100, got {self.clamp_percentiles}")
        if (self.min_intensity is None) != (self.max_intensity is None):
            raise ValueError("min_intensity and max_intensity must be given together")
        if self.min_intensity is not None and not (self.min_intensity < self.max_intensity):
            raise ValueError("min_intensity must be < max_intensity")


def normalize_intensities(v: Volume3D, spec: NormalizationSpec | None = None) -> Volume3D:
    """Clamp to the spec's bounds and affinely rescale intensities into [0, 1]."""
    spec = spec or NormalizationSpec()
    if spec.min_intensity is not None:
        lo, hi = float(spec.min_intensity), float(spec.max_intensity)
    else:
        lo, hi = (float(x) for x in np.percentile(v.data, spec.clamp_percentiles))
    if not (hi > lo):
        raise ValueError("degenerate intensity range")
    out = np.clip((v.data - lo) / (hi - lo), 0.0, 1.0)
    return Volume3D(out, v.spacing)


def downsample(v: Volume3D, factor: int) -> Volume3D:
    """Block-mean downsample by an integer factor.

    Output dims are ceil(dim / factor); partial blocks at the far boundary
    average over the voxels that exist.  Spacing is multiplied by the factor.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return Volume3D(v.data.copy(), v.spacing)
    nx, ny, nz = v.dims
    cx, cy, cz = (-(-n // factor) for n in (nx, ny, nz))
    acc = np.zeros((cx, cy, cz))
    cnt = np.zeros((cx, cy, cz))
    for dx in range(factor):
        for dy in range(factor):
            for dz in range(factor):
                sub = v.data[dx::factor, dy::factor, dz::factor]
                sx, sy, sz = sub.shape
                acc[:sx, :sy, :sz] += sub
                cnt[:sx, :sy, :sz] += 1.0
    spacing = tuple(s * factor for s in v.spacing)
    return Volume3D(acc / cnt, spacing)


# ---------------------------------------------------------------------------
# NIfTI-1 support (deliberately minimal: single uncompressed .nii file,
# float32 or int16 payload, scl_slope/scl_inter honored, orientation ignored).
# ---------------------------------------------------------------------------

_HDR_SIZE = 348
_DT_INT16 = 4
_DT_FLOAT32 = 16


def _read_nifti(path: str) -> Volume3D:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HDR_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != _HDR_SIZE:
            raise FormatError(f"{path}: bad sizeof_hdr (not a NIfTI-1 file?)")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    dim = struct.unpack_from(order + "8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"{path}: only 3-D volumes are supported (dim[0]={dim[0]})")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)}")
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    (scl_slope,) = struct.unpack_from(order + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(order + "f", raw, 116)

    if datatype == _DT_FLOAT32:
        np_dtype = np.dtype(order + "f4")
    elif datatype == _DT_INT16:
        np_dtype = np.dtype(order + "i2")
    else:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")

    offset = int(vox_offset)
    if offset < _HDR_SIZE:
        raise FormatError(f"{path}: vox_offset {offset} overlaps the header")
    nvox = nx * ny * nz
    expected = offset + nvox * np_dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size mismatch (file {len(raw)} bytes, header implies {expected})")

    flat = np.frombuffer(raw, dtype=np_dtype, count=nvox, offset=offset)
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float64)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * float(scl_slope) + float(scl_inter)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume3D(data, spacing)


def _nifti_bytes(v: Volume3D) -> bytes:
    nx, ny, nz = v.dims
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DT_FLOAT32)   # datatype
    struct.pack_into("<h", hdr, 72, 32)            # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)        # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)          # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)          # scl_inter
    struct.pack_into("<b", hdr, 123, 2)            # xyzt_units: mm
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    return bytes(hdr) + b"\x00\x00\x00\x00" + payload


def _write_nifti(v: Volume3D, path: str) -> None:
    with open(path, "wb") as f:
        f.write(_nifti_bytes(v))


# ---------------------------------------------------------------------------
# Raw format: <name>.f32raw little-endian float32 payload (x-fastest) plus a
# <name>.hdr.txt sidecar with `dims: nx ny nz` and `spacing: sx sy sz` lines.
# ---------------------------------------------------------------------------


def _raw_sidecar(path: str) -> str:
    base = path[: -len(".f32raw")]
    return base + ".hdr.txt"


def _read_raw(path: str) -> Volume3D:
    sidecar = _raw_sidecar(path)
    if not os.path.exists(sidecar):
        raise FormatError(f"{path}: missing sidecar header {sidecar}")
    dims = spacing = None
    with open(sidecar, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(":")
            vals = rest.split()
            if key.strip() == "dims":
                if len(vals) != 3:
                    raise FormatError(f"{sidecar}: dims line needs 3 integers")
                dims = tuple(int(x) for x in vals)
            elif key.strip() == "spacing":
                if len(vals) != 3:
                    raise FormatError(f"{sidecar}: spacing line needs 3 floats")
                spacing = tuple(float(x) for x in vals)
    if dims is None or spacing is None:
        raise FormatError(f"{sidecar}: missing dims or spacing line")
    if min(dims) < 1:
        raise FormatError(f"{sidecar}: non-positive dims {dims}")
    nvox = dims[0] * dims[1] * dims[2]
    payload = np.fromfile(path, dtype="<f4")
    if payload.size != nvox:
        raise FormatError(f"{path}: payload has {payload.size} voxels, header implies {nvox}")
    data = payload.reshape(dims, order="F").astype(np.float64)
    return Volume3D(data, spacing)


def _raw_sidecar_text(v: Volume3D) -> str:
    dims_line = "dims: {} {} {}\n".format(*v.dims)
    spacing_line = "spacing: {} {} {}\n".format(*(repr(s) for s in v.spacing))
    return dims_line + spacing_line


def _write_raw(v: Volume3D, path: str) -> None:
    np.asarray(v.data, dtype="<f4").ravel(order="F").tofile(path)
    with open(_raw_sidecar(path), "w", encoding="ascii") as f:
        f.write(_raw_sidecar_text(v))


def volume_file_blobs(v: Volume3D, path: str) -> list[tuple[str, bytes]]:
    """The (path, bytes) pairs a write_volume(v, path) call would produce."""
    path = os.fspath(path)
    if path.endswith(".nii"):
        return [(path, _nifti_bytes(v))]
    if path.endswith(".f32raw"):
        payload = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
        return [(path, payload), (_raw_sidecar(path), _raw_sidecar_text(v).encode("ascii"))]
    raise FormatError(f"{path}: unrecognized extension (expected .nii or .f32raw)")


def read_volume(path: str) -> Volume3D:
    """Read a volume from a .nii (NIfTI-1) or .f32raw file."""
    path = os.fspath(path)
    if path.endswith(".nii"):
        return _read_nifti(path)
    if path.endswith(".f32raw"):
        return _read_raw(path)
    raise FormatError(f"{path}: unrecognized extension (expected .nii or .f32raw)")


def write_volume(v: Volume3D, path: str) -> None:
    """Write a volume as .nii or .f32raw (+ sidecar); payload is float32."""
    path = os.fspath(path)
    if path.endswith(".nii"):
        _write_nifti(v, path)
    elif path.endswith(".f32raw"):
        _write_raw(v, path)
    else:
        raise FormatError(f"{path}: unrecognized extension (expected .nii or .f32raw)")
