"""Little-endian tensor blobs: rank (u64), extents (u64 each), float32 payload."""

import struct

import numpy as np

from pointcaps.errors import DimensionError


def tensor_to_bytes(array):
    array = np.asarray(getattr(array, "data", array))
    header = struct.pack("<Q", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def tensor_from_bytes(blob):
    """Inverse of :func:`tensor_to_bytes`; returns a float32 ndarray."""
    if len(blob) < 8:
        raise DimensionError("tensor blob shorter than its header")
    (rank,) = struct.unpack_from("<Q", blob, 0)
    if len(blob) < 8 + 8 * rank:
        raise DimensionError(f"tensor blob too short for a rank-{rank} header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) - offset != 4 * count:
        raise DimensionError(f"tensor blob payload does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).astype(np.float32).reshape(shape)
