"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .._errors import ValidationError

HEADER_SIZE = 348
VOX_OFFSET = 352

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {dt: code for code, dt in DATATYPES.items()}


@dataclass(frozen=True)
class Volume:
    """Image grid with voxel sizes in mm.

    ``raw`` holds the stored values in their on-disk dtype, indexed
    ``[x, y, z(, t)]``; :attr:`data` applies the intensity scaling.
    """

    dims: tuple
    voxel_size: tuple
    raw: np.ndarray
    slope: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if tuple(self.raw.shape) != tuple(self.dims):
            raise ValidationError("BAD_DIMS", f"data shape {self.raw.shape} != dims {self.dims}")
        if any(d <= 0 for d in self.dims):
            raise ValidationError("BAD_DIMS", f"dims must be positive: {self.dims}")
        if len(self.voxel_size) != 3 or any(not v > 0 for v in self.voxel_size):
            raise ValidationError("BAD_VOXEL_SIZE", f"voxel sizes must be > 0: {self.voxel_size}")
        if self.raw.dtype not in _CODES:
            raise ValidationError("UNSUPPORTED_DATATYPE", str(self.raw.dtype))

    @classmethod
    def from_array(cls, data, voxel_size=(1.0, 1.0, 1.0), dtype=np.float32) -> "Volume":
        raw = np.asarray(data).astype(dtype)
        return cls(tuple(int(d) for d in raw.shape), tuple(float(v) for v in voxel_size), raw)

    @property
    def data(self) -> np.ndarray:
        out = self.raw.astype(np.float64)
        if self.slope != 0 and np.isfinite(self.slope):
            out = out * self.slope + self.intercept
        return out

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims[:3]))

    @property
    def voxel_volume(self) -> float:
        dx, dy, dz = self.voxel_size
        return float(dx) * float(dy) * float(dz)


def _byte_order(header: bytes) -> str:
    for order in ("<", ">"):
        ndim = struct.unpack_from(order + "h", header, 40)[0]
        if 1 <= ndim <= 7:
            return order
    raise ValidationError("BAD_DIM", "dim[0] outside [1, 7] in both byte orders")


def read_nifti(data) -> Volume:
    """Decode a single-file NIfTI-1 image from bytes (gzip detected by magic)."""
    data = bytes(data)
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < HEADER_SIZE:
        raise ValidationError("TRUNCATED", f"{len(data)} bytes, header needs {HEADER_SIZE}")
    header = data[:HEADER_SIZE]
    magic = header[344:348]
    if magic == b"ni1\x00":
        raise ValidationError("UNSUPPORTED_LAYOUT", "detached .hdr/.img pair is not supported")
    if magic != b"n+1\x00":
        raise ValidationError("BAD_MAGIC", repr(magic))
    order = _byte_order(header)
    dim = struct.unpack_from(order + "8h", header, 40)
    datatype = struct.unpack_from(order + "h", header, 70)[0]
    pixdim = struct.unpack_from(order + "8f", header, 76)
    vox_offset, slope, inter = struct.unpack_from(order + "3f", header, 108)
    if datatype not in DATATYPES:
        raise ValidationError("UNSUPPORTED_DATATYPE", f"datatype code {datatype}")
    ndim = dim[0]
    dims = tuple(int(d) for d in dim[1:ndim + 1])
    if any(d < 1 for d in dims):
        raise ValidationError("BAD_DIM", f"non-positive dimension in {dims}")
    dtype = DATATYPES[datatype].newbyteorder(order)
    count = int(np.prod(dims))
    start = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    stop = start + count * dtype.itemsize
    if len(data) < stop:
        raise ValidationError("TRUNCATED", f"payload needs {stop} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    raw = raw.astype(dtype.newbyteorder("=")).reshape(dims, order="F")
    # 3-D images still carry 3 voxel sizes
    voxel = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return Volume(dims, voxel, raw, float(slope) if np.isfinite(slope) else 0.0,
                  float(inter) if np.isfinite(inter) else 0.0)


def write_nifti(volume: Volume, compress: bool = False) -> bytes:
    """Encode ``volume`` as little-endian single-file NIfTI-1."""
    hdr = bytearray(VOX_OFFSET)
    dims = list(volume.dims)
    dim = [len(dims)] + dims + [1] * (7 - len(dims))
    dtype = volume.raw.dtype.newbyteorder("=")
    code = _CODES[np.dtype(dtype)]
    pixdim = [1.0, *volume.voxel_size, 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), volume.slope, volume.intercept)
    hdr[123] = 10  # xyzt_units: mm + s
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(volume.raw, dtype=dtype.newbyteorder("<")).tobytes(order="F")
    out = bytes(hdr) + payload
    if compress:
        out = gzip.compress(out, mtime=0)
    return out
