"""
MART1 Tensor File Format

Layout (little-endian):
    magic    4 bytes  b"MART"
    version  u32      1
    dtype    u8       0 = float32, 1 = float64
    ndim     u8
    extents  ndim x u64
    payload  row-major values

Usage:
    write_mart(path, array)
    array = read_mart(path)
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..utils.errors import FormatError
from ..utils.files import atomic_write_bytes

MAGIC = b"MART"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBB")


def encode_mart(array: np.ndarray, dtype: Union[str, np.dtype, None] = None) -> bytes:
    """Serialize an array; dtype defaults to the array's own float width."""
    array = np.asarray(array)
    target = np.dtype(dtype).newbyteorder("<") if dtype is not None else array.dtype.newbyteorder("<")
    if target not in _DTYPE_CODES:
        raise FormatError("MART1 stores float32 or float64 only", dtype=str(array.dtype))
    if array.ndim > 255:
        raise FormatError("too many dimensions for MART1", ndim=array.ndim)
    payload = np.ascontiguousarray(array, dtype=target)
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[target], array.ndim)
    extents = struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + extents + payload.tobytes(order="C")


def decode_mart(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("MART1 blob shorter than its header", size=len(blob))
    magic, version, code, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad MART1 magic", magic=magic)
    if version != VERSION:
        raise FormatError("unsupported MART1 version", version=version)
    if code not in _CODE_DTYPES:
        raise FormatError("unknown MART1 dtype code", code=code)
    offset = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError("MART1 payload size mismatch", expected=expected, actual=len(blob))
    array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_mart(path: Union[str, Path], array: np.ndarray,
               dtype: Union[str, np.dtype, None] = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_mart(array, dtype))
    return path


def read_mart(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read MART1 file {path}", reason=str(e)) from e
    return decode_mart(blob)
