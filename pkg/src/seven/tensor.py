"""Dense tensor helpers and the binary tensor snapshot format.

Values are plain numpy arrays in row-major order. Unit tests and gradient
checks run in float64; training may run in float32 (``precision: single``).
"""

import struct

import numpy as np

from .errors import DataFormatError, ShapeMismatchError

DTYPE = np.float64

SNAPSHOT_MAGIC = b"SEVN"
SNAPSHOT_VERSION = 1

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.size == 0:
        raise ShapeMismatchError(f"tensors must have all extents >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def elementwise(op: str, a, b) -> np.ndarray:
    """Componentwise add/sub/mul of two equal-shape tensors. Inputs are not mutated."""
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}, expected one of {sorted(_OPS)}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"elementwise {op}: shapes differ, {a.shape} vs {b.shape}")
    return _OPS[op](a, b)


def l2_norm(a) -> float:
    """Euclidean norm of the flattened tensor; 0 for the zero tensor."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    return a @ b


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize: magic, version byte, rank byte, extents as u64 LE, data as f64 LE."""
    arr = np.ascontiguousarray(arr)
    rank = arr.ndim
    if rank > 255:
        raise DataFormatError(f"tensor rank {rank} exceeds snapshot limit")
    header = SNAPSHOT_MAGIC + bytes([SNAPSHOT_VERSION, rank])
    header += struct.pack("<%dQ" % rank, *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one snapshot starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 6:
        raise DataFormatError(f"tensor snapshot truncated in header at byte {offset}")
    if buf[offset:offset + 4] != SNAPSHOT_MAGIC:
        raise DataFormatError(
            f"bad tensor magic at byte {offset}: {buf[offset:offset + 4]!r}, expected {SNAPSHOT_MAGIC!r}")
    version = buf[offset + 4]
    if version != SNAPSHOT_VERSION:
        raise DataFormatError(f"unsupported tensor snapshot version {version} at byte {offset}")
    rank = buf[offset + 5]
    pos = offset + 6
    if len(buf) < pos + 8 * rank:
        raise DataFormatError(f"tensor snapshot truncated in shape at byte {pos}")
    shape = struct.unpack_from("<%dQ" % rank, buf, pos)
    pos += 8 * rank
    count = 1
    for extent in shape:
        if extent < 1:
            raise DataFormatError(f"tensor snapshot has extent {extent} < 1 at byte {offset}")
        count *= extent
    nbytes = 8 * count
    if len(buf) < pos + nbytes:
        raise DataFormatError(
            f"tensor snapshot truncated in data at byte {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float64), pos + nbytes


def save_tensor(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf, 0)
    if end != len(buf):
        raise DataFormatError(f"{path}: trailing {len(buf) - end} bytes after tensor data")
    return arr
