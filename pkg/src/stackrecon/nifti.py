"""Minimal NIfTI-1 single-file (.nii) reader and writer.

Supports exactly the data class needed for clinical stack interchange:
3D volumes stored as float32 (datatype 16) or int16 with scl_slope /
scl_inter scaling (datatype 4). The 348-byte header is parsed directly;
little- and big-endian files are auto-detected from dim[0] in [1, 7].
The srow affine is preferred, the quaternion qform is the fallback, and a
pixdim-diagonal affine is assumed when neither code is set.

Each rejection reason carries a distinct ``code`` so callers (and the CLI)
can tell bad magic, unsupported dtypes, and truncated payloads apart.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError
from .volume import VoxelGrid3D

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

_DT_INT16 = 4
_DT_FLOAT32 = 16


class NiftiError(InputError):
    """Base NIfTI error; ``code`` distinguishes the failure class."""

    code = "nifti_error"


class NiftiBadMagic(NiftiError):
    code = "bad_magic"


class NiftiUnsupportedDtype(NiftiError):
    code = "unsupported_dtype"


class NiftiTruncated(NiftiError):
    code = "truncated_data"


class NiftiBadHeader(NiftiError):
    code = "bad_header"


class NiftiUnsupportedGeometry(NiftiError):
    code = "unsupported_geometry"


def _detect_endianness(raw: bytes) -> str:
    for endian in ("<", ">"):
        (dim0,) = struct.unpack(endian + "h", raw[40:42])
        if 1 <= dim0 <= 7:
            return endian
    raise NiftiBadHeader("cannot detect byte order: dim[0] not in [1, 7]")


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def _affine_to_geometry(affine: np.ndarray):
    m = affine[:3, :3]
    spacing = np.linalg.norm(m, axis=0)
    if np.any(spacing <= 0):
        raise NiftiBadHeader("affine has a zero-length column")
    axes = m / spacing
    err = np.max(np.abs(axes.T @ axes - np.eye(3)))
    if err > 1e-3:
        raise NiftiUnsupportedGeometry(
            f"sheared/non-orthonormal affine (deviation {err:.2e})"
        )
    if err > 1e-12:
        # polish float32 header rounding to machine-precision orthonormality
        u, _, vt = np.linalg.svd(axes)
        axes = u @ vt
    return spacing, axes, affine[:3, 3]


def read_nifti(path) -> VoxelGrid3D:
    """Read a single-file NIfTI-1 volume into a :class:`VoxelGrid3D`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncated(f"file shorter than the {HEADER_SIZE}-byte header")
    magic = raw[344:348]
    if magic not in (_MAGIC_SINGLE, _MAGIC_PAIR):
        raise NiftiBadMagic(f"bad magic {magic!r}")
    if magic == _MAGIC_PAIR:
        raise NiftiBadHeader("two-file (.hdr/.img) NIfTI pairs are not supported")
    en = _detect_endianness(raw)
    (sizeof_hdr,) = struct.unpack(en + "i", raw[0:4])
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiBadHeader(f"sizeof_hdr = {sizeof_hdr}, expected {HEADER_SIZE}")
    dim = struct.unpack(en + "8h", raw[40:56])
    if dim[0] < 3:
        raise NiftiBadHeader(f"dim[0] = {dim[0]}: not a 3D volume")
    if any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise NiftiBadHeader("4D/5D volumes are not supported")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise NiftiBadHeader(f"non-positive dims {dims}")
    (datatype, bitpix) = struct.unpack(en + "2h", raw[70:74])
    pixdim = struct.unpack(en + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(en + "f", raw[108:112])
    (scl_slope, scl_inter) = struct.unpack(en + "2f", raw[112:120])
    (qform_code, sform_code) = struct.unpack(en + "2h", raw[252:256])
    quat = struct.unpack(en + "6f", raw[256:280])
    srow = np.array(struct.unpack(en + "12f", raw[280:328])).reshape(3, 4)

    if datatype == _DT_FLOAT32:
        np_dtype, itemsize = np.dtype(en + "f4"), 4
    elif datatype == _DT_INT16:
        np_dtype, itemsize = np.dtype(en + "i2"), 2
    else:
        raise NiftiUnsupportedDtype(f"datatype {datatype} not supported")
    if bitpix != itemsize * 8:
        raise NiftiBadHeader(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    n_items = dims[0] * dims[1] * dims[2]
    if len(raw) < offset + n_items * itemsize:
        raise NiftiTruncated(
            f"need {offset + n_items * itemsize} bytes, file has {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=np_dtype, count=n_items, offset=offset)
    data = flat.reshape(dims, order="F")

    if datatype == _DT_INT16:
        slope = scl_slope if scl_slope not in (0.0,) else 1.0
        data = data.astype(np.float64) * slope + scl_inter
    else:
        data = data.astype("=f4")
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            data = data.astype(np.float64) * scl_slope + scl_inter

    if sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = srow
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        r = _quaternion_rotation(quat[0], quat[1], quat[2])
        affine = np.eye(4)
        affine[:3, :3] = r @ np.diag([pixdim[1], pixdim[2], qfac * pixdim[3]])
        affine[:3, 3] = quat[3:6]
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])

    spacing, axes, origin = _affine_to_geometry(affine)
    return VoxelGrid3D(dims, tuple(spacing), tuple(origin), axes, data)


def write_nifti(grid: VoxelGrid3D, path, dtype: str = "float32") -> None:
    """Write a volume as a little-endian single-file NIfTI-1 (.nii).

    dtype="float32" stores raw float32 voxels; dtype="int16" quantizes to
    int16 with scl_slope / scl_inter chosen to span the data range.
    """
    if dtype not in ("float32", "int16"):
        raise NiftiUnsupportedDtype(f"write dtype {dtype!r} not supported")
    data = np.asarray(grid.data)
    if dtype == "float32":
        datatype, bitpix = _DT_FLOAT32, 32
        slope, inter = 1.0, 0.0
        payload = data.astype("<f4").tobytes(order="F")
    else:
        datatype, bitpix = _DT_INT16, 16
        dmin, dmax = float(data.min()), float(data.max())
        if dmax > dmin:
            slope = (dmax - dmin) / 65533.0
            inter = dmin + 32766.0 * slope
        else:
            slope, inter = 1.0, dmin
        stored = np.round((data - inter) / slope).astype("<i2")
        payload = stored.tobytes(order="F")

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[39] = ord("r")  # regular
    dim = [3, grid.dims[0], grid.dims[1], grid.dims[2], 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    pixdim = [1.0, grid.spacing[0], grid.spacing[1], grid.spacing[2], 0, 0, 0, 0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[123] = 2  # spatial units: mm
    struct.pack_into("<80s", hdr, 148, b"stackrecon")
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    affine = grid.affine
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].reshape(-1))
    struct.pack_into("<4s", hdr, 344, _MAGIC_SINGLE)

    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no header extensions
        f.write(payload)
