"""Minimal NIfTI-1 reader/writer for single-file .nii volumes.

The reader handles the subset this package produces and consumes: magic
"n+1", scalar datatypes (uint8, int16, int32, float32, float64), up to three
non-trivial dimensions, either byte order, and scl_slope/scl_inter scaling.
The writer always emits little-endian float32 for volumes and uint8 for
masks, with the data section at byte 352.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LabelError, LengthError, UnsupportedError

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4 bytes of extension padding

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


@dataclass
class NiftiHeader:
    shape: tuple[int, int, int]
    datatype: int
    voxel_size: tuple[float, float, float]
    scl_slope: float
    scl_inter: float
    byte_order: str  # "<" or ">"
    vox_offset: int


@dataclass
class Volume:
    """A scalar 3-D image, axes (x, y, z)."""

    values: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise FormatError(f"volumes are 3-D, got ndim={self.values.ndim}")


@dataclass
class Mask:
    """A binary 3-D label image, axes (x, y, z), values 0/1 as uint8."""

    values: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise FormatError(f"masks are 3-D, got ndim={self.values.ndim}")
        if not np.isin(self.values, (0, 1)).all():
            raise LabelError("mask values must be 0 or 1")
        self.values = self.values.astype(np.uint8, copy=False)


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"file too short for a header: {len(buf)} bytes")
    if struct.unpack_from("<i", buf, 0)[0] == HEADER_SIZE:
        order = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        order = ">"
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"unsupported magic {magic!r}; only single-file n+1 is handled")

    dim = struct.unpack_from(order + "8h", buf, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"dim[0] must be 1..7, got {ndim}")
    extents = dim[1:1 + ndim]
    if any(e < 1 for e in extents):
        raise FormatError(f"non-positive extent in dim: {extents}")
    if any(e != 1 for e in extents[3:]):
        raise UnsupportedError(f"more than three non-trivial dimensions: {extents}")
    shape = tuple(extents[:3]) + (1,) * (3 - min(ndim, 3))

    datatype, bitpix = struct.unpack_from(order + "hh", buf, 70)
    if datatype not in _DTYPES:
        raise UnsupportedError(f"datatype {datatype} is not supported")
    if bitpix != _DTYPES[datatype].itemsize * 8:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = struct.unpack_from(order + "8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(order + "3f", buf, 108)
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {vox_offset} points inside the header")
    return NiftiHeader(
        shape=shape,  # type: ignore[arg-type]
        datatype=datatype,
        voxel_size=(float(pixdim[1]), float(pixdim[2]), float(pixdim[3])),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        byte_order=order,
        vox_offset=int(vox_offset),
    )


def read_nifti(src: str | Path | bytes) -> Volume | Mask:
    """Decode a .nii byte stream or file; uint8 images of pure 0/1 come back
    as Mask, everything else as Volume."""
    buf = bytes(src) if isinstance(src, (bytes, bytearray)) else Path(src).read_bytes()
    header = parse_header(buf)
    dtype = _DTYPES[header.datatype].newbyteorder(header.byte_order)
    count = int(np.prod(header.shape))
    if header.vox_offset + count * dtype.itemsize > len(buf):
        raise LengthError(f"data section truncated: header promises {count} voxels "
                          f"from offset {header.vox_offset}, stream has {len(buf)} bytes")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=header.vox_offset)
    # NIfTI data is x-fastest; unflatten in Fortran order to get (x, y, z).
    grid = np.ascontiguousarray(raw.reshape(header.shape, order="F"))

    scaled = header.scl_slope != 0.0 and (header.scl_slope, header.scl_inter) != (1.0, 0.0)
    if header.datatype == 2 and not scaled and np.isin(grid, (0, 1)).all():
        return Mask(values=grid.astype(np.uint8), voxel_size=header.voxel_size)
    values = grid.astype(np.float32)
    if scaled:
        values = values * np.float32(header.scl_slope) + np.float32(header.scl_inter)
    return Volume(values=values, voxel_size=header.voxel_size)


def _build_header(shape: tuple[int, int, int], datatype: int,
                  voxel_size: tuple[float, float, float]) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, _DTYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, voxel_size[0], voxel_size[1], voxel_size[2],
                     0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(DATA_OFFSET), 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(image: Volume | Mask, path: str | Path | None = None) -> bytes:
    """Encode as little-endian .nii (float32 volume / uint8 mask) and return
    the bytes; also write them to ``path`` when given."""
    if isinstance(image, Mask):
        datatype, cast = 2, np.dtype(np.uint8)
    elif isinstance(image, Volume):
        datatype, cast = 16, np.dtype("<f4")
    else:
        raise TypeError(f"cannot write {type(image).__name__} as NIfTI")
    values = np.asarray(image.values, dtype=cast)
    header = _build_header(values.shape, datatype, image.voxel_size)
    blob = header + b"\x00" * (DATA_OFFSET - HEADER_SIZE) + values.flatten(order="F").tobytes()
    if path is not None:
        Path(path).write_bytes(blob)
    return blob
