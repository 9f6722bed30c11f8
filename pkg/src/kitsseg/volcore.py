"""Volume data model, geometry bookkeeping and NIfTI-1 I/O.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  The *linear* voxel
index used on disk runs x fastest (Fortran order); in memory arrays are kept
C-contiguous, which is an implementation detail.

Spacing and origin are rounded to float32 precision on construction because
the NIfTI-1 header stores them as float32; this makes write/read an exact
round trip on geometry.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KITS_LABELS = (0, 1, 2, 3)

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352  # header + 4-byte extension flag
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_FLOAT32: np.dtype("<f4")}

# (format, offset) for every header field that is read or written
_HDR = {
    "sizeof_hdr": ("<i", 0),
    "dim_info": ("<B", 39),
    "dim": ("<8h", 40),
    "datatype": ("<h", 70),
    "bitpix": ("<h", 72),
    "pixdim": ("<8f", 76),
    "vox_offset": ("<f", 108),
    "scl_slope": ("<f", 112),
    "scl_inter": ("<f", 116),
    "xyzt_units": ("<B", 123),
    "descrip": ("<80s", 148),
    "qform_code": ("<h", 252),
    "sform_code": ("<h", 254),
    "quatern": ("<3f", 256),
    "qoffset": ("<3f", 268),
    "srow_x": ("<4f", 280),
    "srow_y": ("<4f", 296),
    "srow_z": ("<4f", 312),
    "magic": ("<4s", 344),
}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file."""


def _f32(values):
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True)
class Geometry:
    """Voxel grid: shape (voxels), spacing (mm/voxel) and origin (mm)."""

    shape: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = _f32(self.spacing)
        origin = _f32(self.origin)
        if len(shape) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs exactly 3 axes")
        if any(s < 1 for s in shape):
            raise ValueError(f"shape must be >= 1 on every axis, got {shape}")
        if not all(np.isfinite(spacing)) or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be > 0 on every axis, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]

    def ravel_index(self, ijk):
        """Linear (x-fastest) index of voxel ``ijk``."""
        return int(np.ravel_multi_index(tuple(int(v) for v in ijk), self.shape, order="F"))

    def unravel_index(self, index):
        return tuple(int(v) for v in np.unravel_index(int(index), self.shape, order="F"))

    def with_(self, **changes) -> "Geometry":
        fields_ = {"shape": self.shape, "spacing": self.spacing, "origin": self.origin}
        fields_.update(changes)
        return Geometry(**fields_)


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense float32 scalar grid with geometry; immutable after construction."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.geometry.shape:
            raise ValueError(f"data shape {data.shape} does not match geometry {self.geometry.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self):
        return self.geometry.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense uint8 KiTS label grid: 0 background, 1 kidney, 2 tumor, 3 cyst."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.shape != self.geometry.shape:
            raise ValueError(f"data shape {raw.shape} does not match geometry {self.geometry.shape}")
        if raw.dtype.kind == "f":
            if not np.isfinite(raw).all() or (raw != np.round(raw)).any():
                raise ValueError("label data must be integral")
        if raw.size and (raw.min() < 0 or raw.max() > 3):
            raise ValueError("label values must lie in {0, 1, 2, 3}")
        object.__setattr__(self, "data", _freeze(raw.astype(np.uint8)))

    @property
    def shape(self):
        return self.geometry.shape


@dataclass(frozen=True, eq=False)
class MultiChannelProb:
    """C probability channels on one geometry; ``data`` has shape (C, X, Y, Z)."""

    geometry: Geometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[1:] != self.geometry.shape or data.shape[0] < 1:
            raise ValueError(
                f"probability data shape {data.shape} does not match (C,) + {self.geometry.shape}"
            )
        if not np.isfinite(data).all():
            raise ValueError("probabilities contain non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self):
        return [Volume(self.geometry, c) for c in self.data]

    @classmethod
    def from_channels(cls, channels):
        channels = list(channels)
        if not channels:
            raise ValueError("need at least one channel")
        geom = channels[0].geometry
        if any(c.geometry != geom for c in channels):
            raise ValueError("channels must share one geometry")
        return cls(geom, np.stack([c.data for c in channels]))


# ---------------------------------------------------------------- NIfTI-1


def _pack(buf, name, *values):
    fmt, off = _HDR[name]
    struct.pack_into(fmt, buf, off, *values)


def _unpack(buf, name):
    fmt, off = _HDR[name]
    out = struct.unpack_from(fmt, buf, off)
    return out[0] if len(out) == 1 else out


def _encode_header(geometry: Geometry, datatype: int, channels: int | None) -> bytearray:
    buf = bytearray(NIFTI_HEADER_SIZE)
    nx, ny, nz = geometry.shape
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    if channels is None:
        dim = (3, nx, ny, nz, 1, 1, 1, 1)
    else:
        dim = (4, nx, ny, nz, channels, 1, 1, 1)
    _pack(buf, "sizeof_hdr", NIFTI_HEADER_SIZE)
    _pack(buf, "dim", *dim)
    _pack(buf, "datatype", datatype)
    _pack(buf, "bitpix", _DTYPES[datatype].itemsize * 8)
    _pack(buf, "pixdim", 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    _pack(buf, "vox_offset", float(NIFTI_VOX_OFFSET))
    _pack(buf, "scl_slope", 1.0)
    _pack(buf, "scl_inter", 0.0)
    _pack(buf, "xyzt_units", 2)  # NIFTI_UNITS_MM
    _pack(buf, "descrip", b"kitsseg")
    _pack(buf, "qform_code", 1)
    _pack(buf, "sform_code", 1)
    _pack(buf, "quatern", 0.0, 0.0, 0.0)
    _pack(buf, "qoffset", ox, oy, oz)
    _pack(buf, "srow_x", sx, 0.0, 0.0, ox)
    _pack(buf, "srow_y", 0.0, sy, 0.0, oy)
    _pack(buf, "srow_z", 0.0, 0.0, sz, oz)
    _pack(buf, "magic", b"n+1\x00")
    return buf


def write_nifti(vol, path) -> None:
    """Write a Volume (float32), LabelMap (uint8) or MultiChannelProb (4D float32)."""
    path = Path(path)
    if isinstance(vol, LabelMap):
        datatype, payload, channels = DT_UINT8, vol.data, None
    elif isinstance(vol, Volume):
        datatype, payload, channels = DT_FLOAT32, vol.data, None
    elif isinstance(vol, MultiChannelProb):
        # channel axis goes last on disk: (x, y, z, c)
        datatype, payload, channels = DT_FLOAT32, np.moveaxis(vol.data, 0, -1), vol.num_channels
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    header = _encode_header(vol.geometry, datatype, channels)
    body = np.asarray(payload, dtype=_DTYPES[datatype]).tobytes(order="F")
    blob = bytes(header) + b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE) + body
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _decode_geometry(hdr, shape):
    pixdim = _unpack(hdr, "pixdim")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiError(f"non-positive pixdim {spacing}")
    origin = (0.0, 0.0, 0.0)
    sform_code = _unpack(hdr, "sform_code")
    qform_code = _unpack(hdr, "qform_code")
    if sform_code > 0:
        rows = np.array([_unpack(hdr, "srow_x"), _unpack(hdr, "srow_y"), _unpack(hdr, "srow_z")])
        lin = rows[:, :3]
        if np.any(lin[~np.eye(3, dtype=bool)] != 0):
            raise NiftiError("oblique or permuted sform is not supported")
        if not np.allclose(np.diag(lin), spacing, rtol=1e-5, atol=0):
            raise NiftiError("sform scaling disagrees with pixdim (flipped axes are not supported)")
        origin = tuple(float(v) for v in rows[:, 3])
    elif qform_code > 0:
        b, c, d = _unpack(hdr, "quatern")
        qfac = pixdim[0] if pixdim[0] != 0 else 1.0
        if (b, c, d) != (0.0, 0.0, 0.0) or qfac < 0:
            raise NiftiError("rotated or flipped qform is not supported")
        origin = tuple(float(v) for v in _unpack(hdr, "qoffset"))
    return Geometry(shape, spacing, origin)


def read_nifti(path, labels=None):
    """Read a NIfTI-1 file (``.nii`` or gzip-compressed).

    Returns a ``Volume`` for 3D float data, a ``MultiChannelProb`` for 4D data
    and a ``LabelMap`` for uint8 data with values <= 3.  ``labels=True``
    demands a LabelMap, ``labels=False`` forces a float Volume.
    """
    raw = _read_bytes(Path(path))
    if len(raw) < NIFTI_HEADER_SIZE:
        raise NiftiError("file too short for a NIfTI-1 header")
    hdr = raw[:NIFTI_HEADER_SIZE]
    magic = _unpack(hdr, "magic")
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError("bad magic: not a NIfTI-1 file")
    if magic == b"ni1\x00":
        raise NiftiError("detached header/image pairs (.hdr/.img) are not supported")
    if _unpack(hdr, "sizeof_hdr") != NIFTI_HEADER_SIZE:
        raise NiftiError("bad sizeof_hdr (big-endian files are not supported)")

    datatype = _unpack(hdr, "datatype")
    if datatype not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype]

    dim = _unpack(hdr, "dim")
    ndim = dim[0]
    if ndim not in (3, 4) or any(d < 1 for d in dim[1 : ndim + 1]):
        raise NiftiError(f"unsupported dim field {dim}")
    shape = tuple(int(d) for d in dim[1:4])
    nchan = int(dim[4]) if ndim == 4 else None
    count = int(np.prod(shape)) * (nchan or 1)

    offset = int(_unpack(hdr, "vox_offset"))
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError("truncated image data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape + ((nchan,) if nchan else ()), order="F")

    slope, inter = _unpack(hdr, "scl_slope"), _unpack(hdr, "scl_inter")
    scaled = slope not in (0.0, 1.0) or inter != 0.0
    if scaled:
        if datatype != DT_FLOAT32:
            raise NiftiError("intensity scaling on integer data is not supported")
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    if datatype == DT_FLOAT32 and not np.isfinite(data).all():
        raise NiftiError("image contains NaN or Inf")

    geometry = _decode_geometry(hdr, shape)
    if nchan is not None:
        return MultiChannelProb(geometry, np.moveaxis(data, -1, 0))

    if labels is None:
        labels = datatype == DT_UINT8 and (data.size == 0 or data.max() <= 3)
    if labels:
        if datatype != DT_UINT8:
            raise NiftiError("label maps must be stored as uint8")
        if data.max() > 3:
            raise NiftiError("label data outside {0, 1, 2, 3}")
        return LabelMap(geometry, data)
    return Volume(geometry, data)
