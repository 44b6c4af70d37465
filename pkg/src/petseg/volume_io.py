"""Volumes, label maps and single-file NIfTI-1 (.nii) reading/writing.

Arrays are indexed ``[D, H, W]`` = ``[z, y, x]``; NIfTI stores x fastest,
so ``dim[1..3]`` of the header is ``(W, H, D)`` and the voxel block maps
onto a C-ordered ``(D, H, W)`` array without transposition.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .regions import NUM_REGIONS

HEADER_SIZE = 348
VOX_OFFSET = 352
MIN_EXTENT = 8

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionMismatchError(NiftiError):
    pass


class NonFiniteError(NiftiError):
    pass


class PairMismatchError(ValueError):
    pass


@dataclass
class Orientation:
    """qform/sform block, carried through unchanged and never interpreted."""

    qfac: float = 1.0
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    srow: tuple[float, ...] = (0.0,) * 12


def _check_dims(shape: tuple[int, ...], what: str) -> None:
    if len(shape) != 3:
        raise ValueError(f"{what} must be 3-D, got shape {shape}")
    if min(shape) < MIN_EXTENT:
        raise ValueError(f"{what} extents must all be >= {MIN_EXTENT}, got {shape}")


@dataclass
class Volume:
    """Static PET frame in SUV units."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = field(default_factory=Orientation)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        _check_dims(self.data.shape, "Volume")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.data.dtype.kind == "f" and not np.isfinite(self.data).all():
            raise NonFiniteError("Volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Region ids 0..30 per voxel; 0 is background."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = field(default_factory=Orientation)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        _check_dims(self.data.shape, "LabelMap")
        if self.data.dtype.kind not in "iu":
            raise ValueError(f"LabelMap data must be integral, got {self.data.dtype}")
        lo, hi = int(self.data.min()), int(self.data.max())
        if lo < 0 or hi > NUM_REGIONS:
            bad = lo if lo < 0 else hi
            raise ValueError(f"LabelMap value {bad} outside 0..{NUM_REGIONS}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def _detect_endian(buf: bytes) -> str:
    for end in "<>":
        dim0 = struct.unpack_from(f"{end}h", buf, 40)[0]
        if 1 <= dim0 <= 7:
            return end
    raise NiftiError("cannot determine byte order: dim[0] is not in 1..7 either way")


def read_nifti(path: str | Path) -> Volume | LabelMap:
    """Parse a single-file NIfTI-1 image.

    Integral data whose values lie in 0..30 comes back as a LabelMap,
    anything else as a Volume. A nonzero ``scl_slope`` other than the
    identity (1, 0) is applied and yields float64 data.
    """
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < HEADER_SIZE:
        raise DimensionMismatchError(f"{path}: {len(buf)} bytes is shorter than a NIfTI-1 header")
    magic = buf[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError(f"{path}: detached header/image pairs (ni1) are not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected b'n+1\\x00'")
    e = _detect_endian(buf)
    if struct.unpack_from(f"{e}i", buf, 0)[0] != HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")

    dim = struct.unpack_from(f"{e}8h", buf, 40)
    code = struct.unpack_from(f"{e}h", buf, 70)[0]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(e)
    pixdim = struct.unpack_from(f"{e}8f", buf, 76)
    vox_offset = int(struct.unpack_from(f"{e}f", buf, 108)[0])
    slope, inter = struct.unpack_from(f"{e}2f", buf, 112)

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise DimensionMismatchError(f"{path}: expected a 3-D image, header dim = {dim[: ndim + 1]}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise DimensionMismatchError(f"{path}: non-positive extent in dim = {dim[1:4]}")
    count = nx * ny * nz
    need = vox_offset + count * dtype.itemsize
    if len(buf) < need:
        raise DimensionMismatchError(
            f"{path}: header dims {nx}x{ny}x{nz} need {need} bytes, file has {len(buf)}"
        )
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=vox_offset)
    data = raw.astype(dtype.newbyteorder("="), copy=True).reshape(nz, ny, nx)
    if slope != 0 and (slope, inter) != (1.0, 0.0):
        data = data.astype(np.float64) * slope + inter
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: voxel data contains NaN or Inf")

    o = Orientation(
        qfac=pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0,
        qform_code=struct.unpack_from(f"{e}h", buf, 252)[0],
        sform_code=struct.unpack_from(f"{e}h", buf, 254)[0],
        quatern=struct.unpack_from(f"{e}3f", buf, 256),
        qoffset=struct.unpack_from(f"{e}3f", buf, 268),
        srow=struct.unpack_from(f"{e}12f", buf, 280),
    )
    spacing = (pixdim[3], pixdim[2], pixdim[1])
    if any(s <= 0 for s in spacing):
        spacing = (1.0, 1.0, 1.0)
    if data.dtype.kind in "iu" and data.min() >= 0 and data.max() <= NUM_REGIONS:
        return LabelMap(data, spacing, o)
    return Volume(data, spacing, o)


def _header(shape, code: int, bitpix: int, spacing, o: Orientation) -> bytes:
    d, h, w = shape
    hdr = bytearray(HEADER_SIZE + 4)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, bitpix)
    sd, sh, sw = spacing
    struct.pack_into("<8f", hdr, 76, o.qfac, sw, sh, sd, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, VOX_OFFSET, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<hh", hdr, 252, o.qform_code, o.sform_code)
    struct.pack_into("<3f", hdr, 256, *o.quatern)
    struct.pack_into("<3f", hdr, 268, *o.qoffset)
    struct.pack_into("<12f", hdr, 280, *o.srow)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(image: Volume | LabelMap, path: str | Path, dtype=None) -> None:
    """Write a little-endian single-file .nii (vox_offset 352, identity scaling).

    ``dtype`` defaults to float32 for a Volume and uint8 for a LabelMap; any
    of the five supported datatypes may be requested if the values fit.
    """
    if isinstance(image, LabelMap):
        if image.data.min() < 0 or image.data.max() > NUM_REGIONS:
            raise ValueError(f"label values must lie in 0..{NUM_REGIONS}")
        default = np.uint8
    elif isinstance(image, Volume):
        default = np.float32
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(image).__name__}")
    data = image.data
    if data.ndim != 3 or min(data.shape) < 1:
        raise ValueError(f"cannot write image with shape {data.shape}")
    dt = np.dtype(dtype or default)
    if dt not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write datatype {dt}")
    out = data.astype(dt)
    if dt.kind in "iu" and not np.array_equal(out, data):
        raise ValueError(f"values do not fit losslessly in {dt}")
    hdr = _header(data.shape, _CODES[dt], dt.itemsize * 8, image.spacing_mm, image.orientation)
    try:
        Path(path).write_bytes(hdr + out.astype(dt.newbyteorder("<")).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def validate_pair(pet: Volume, labels: LabelMap) -> tuple[Volume, LabelMap]:
    """Check that a PET volume and its label map share a grid."""
    if pet.dims != labels.dims:
        raise PairMismatchError(f"dimension mismatch: PET {pet.dims} vs labels {labels.dims}")
    diff = max(abs(a - b) for a, b in zip(pet.spacing_mm, labels.spacing_mm))
    if diff > 1e-6:
        raise PairMismatchError(f"spacing mismatch: PET {pet.spacing_mm} vs labels {labels.spacing_mm}")
    lo, hi = int(labels.data.min()), int(labels.data.max())
    if lo < 0 or hi > NUM_REGIONS:
        raise PairMismatchError(f"label value {hi if hi > NUM_REGIONS else lo} outside 0..{NUM_REGIONS}")
    return pet, labels
