"""LSB-first packing of unsigned bit fields into byte strings."""
from __future__ import annotations

import numpy as np


def pack_fields(values, widths) -> bytes:
    """Concatenate ``values[i]`` as ``widths[i]``-bit fields, LSB first.

    ``widths`` may be a scalar.  Each field must be at most 63 bits wide.
    """
    values = np.asarray(values, dtype=np.uint64).ravel()
    widths = np.broadcast_to(np.asarray(widths, dtype=np.int64), values.shape)
    total = int(widths.sum())
    if total == 0:
        return b""
    if np.any(widths > 63):
        raise ValueError("bit fields wider than 63 bits are not supported")
    if np.any(values >> widths.astype(np.uint64)):
        raise OverflowError("value does not fit its bit field")
    starts = np.cumsum(widths) - widths
    owner = np.repeat(np.arange(len(values)), widths)
    local = np.arange(total) - starts[owner]
    bits = (values[owner] >> local.astype(np.uint64)) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def unpack_fields(buf: bytes, widths, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_fields`.

    With a scalar width, ``count`` fields are read; otherwise one per entry
    of ``widths``.
    """
    widths = np.asarray(widths, dtype=np.int64)
    if widths.ndim == 0:
        if count is None:
            raise ValueError("count is required with a scalar width")
        widths = np.full(count, int(widths), dtype=np.int64)
    total = int(widths.sum())
    if total > 8 * len(buf):
        raise ValueError(f"need {total} bits, buffer holds {8 * len(buf)}")
    if len(widths) == 0:
        return np.zeros(0, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:total]
    starts = np.cumsum(widths) - widths
    owner = np.repeat(np.arange(len(widths)), widths)
    local = (np.arange(total) - starts[owner]).astype(np.uint64)
    weighted = bits.astype(np.uint64) << local
    out = np.zeros(len(widths), dtype=np.uint64)
    present = widths > 0
    if present.any():
        out[present] = np.add.reduceat(weighted, starts[present])
    return out
