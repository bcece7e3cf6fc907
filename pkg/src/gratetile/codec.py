"""Bit-exact subtensor codecs: bitmask, zero run-length (ZRLC) and raw.

Bitmask layout: ``ceil(n/8)`` mask bytes (bit ``i`` set iff word ``i`` is
nonzero, LSB first) followed by the nonzero words, little-endian.

ZRLC layout: a stream of ``(run, value)`` pairs, ``RUN_BITS + VALUE_BITS``
bits each, packed LSB first and padded to a byte.  ``run`` counts the zeros
before ``value``; a pair with ``value == 0`` stands for ``run`` zeros and no
value.  Runs of ``MAX_RUN`` or more zeros are split into ``(MAX_RUN, 0)``
escapes, and trailing zeros end with a ``(r, 0)`` pair for the remainder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._bits import pack_fields, unpack_fields
from .core import CACHE_LINE_BYTES, WORD_BYTES, GrateTileError

RUN_BITS = 4
VALUE_BITS = 16
MAX_RUN = (1 << RUN_BITS) - 1
PAIR_BITS = RUN_BITS + VALUE_BITS

CODECS = ("bitmask", "zrlc", "raw")


class CorruptBlockError(GrateTileError):
    """A compressed payload does not decode to the declared word count."""


@dataclass(frozen=True)
class CompressedBlock:
    codec: str
    original_words: int
    payload: bytes

    @property
    def size_bytes(self) -> int:
        return len(self.payload)


def _as_words(words) -> np.ndarray:
    arr = np.asarray(words)
    if arr.size == 0:
        raise ValueError("cannot encode an empty word sequence")
    if arr.dtype != np.uint16:
        if np.any(arr < 0) or np.any(arr > 0xFFFF):
            raise ValueError("words must be 16-bit unsigned values")
        arr = arr.astype(np.uint16)
    return arr.ravel()


# --------------------------------------------------------------------------
# bitmask
# --------------------------------------------------------------------------


def bitmask_encode(words) -> CompressedBlock:
    w = _as_words(words)
    mask = w != 0
    payload = np.packbits(mask, bitorder="little").tobytes() + w[mask].astype("<u2").tobytes()
    return CompressedBlock("bitmask", len(w), payload)


def bitmask_decode(block: CompressedBlock) -> np.ndarray:
    """Decode a bitmask block; bytes past the values (line padding) are ignored."""
    n = block.original_words
    mask_bytes = math.ceil(n / 8)
    buf = block.payload
    if len(buf) < mask_bytes:
        raise CorruptBlockError(f"payload has {len(buf)} bytes, mask alone needs {mask_bytes}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=mask_bytes), bitorder="little")
    if bits[n:].any():
        raise CorruptBlockError("mask has bits set past the end of the block")
    mask = bits[:n].astype(bool)
    nnz = int(mask.sum())
    need = mask_bytes + WORD_BYTES * nnz
    if len(buf) < need:
        raise CorruptBlockError(f"payload has {len(buf)} bytes, mask declares {need}")
    out = np.zeros(n, dtype=np.uint16)
    out[mask] = np.frombuffer(buf, dtype="<u2", count=nnz, offset=mask_bytes)
    if np.any(out[mask] == 0):
        raise CorruptBlockError("mask marks a zero word as nonzero")
    return out


# --------------------------------------------------------------------------
# ZRLC
# --------------------------------------------------------------------------


def _zrlc_pairs(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = np.flatnonzero(w)
    gaps = np.diff(nz, prepend=-1) - 1
    escapes = gaps // MAX_RUN
    counts = escapes + 1
    starts = np.cumsum(counts) - counts
    owner = np.repeat(np.arange(len(nz)), counts)
    is_value = (np.arange(int(counts.sum())) - starts[owner]) == escapes[owner]
    runs = np.where(is_value, gaps[owner] % MAX_RUN, MAX_RUN)
    vals = np.where(is_value, w[nz][owner], 0)

    tail = len(w) - 1 - (nz[-1] if len(nz) else -1)
    t_runs = [MAX_RUN] * (tail // MAX_RUN) + ([tail % MAX_RUN] if tail % MAX_RUN else [])
    runs = np.concatenate([runs, np.array(t_runs, dtype=np.int64)])
    vals = np.concatenate([vals, np.zeros(len(t_runs), dtype=vals.dtype)])
    return runs.astype(np.uint64), vals.astype(np.uint64)


def zrlc_encode(words) -> CompressedBlock:
    w = _as_words(words)
    runs, vals = _zrlc_pairs(w)
    payload = pack_fields(runs | (vals << np.uint64(RUN_BITS)), PAIR_BITS)
    return CompressedBlock("zrlc", len(w), payload)


def zrlc_decode(block: CompressedBlock) -> np.ndarray:
    """Decode a ZRLC stream; trailing all-zero padding pairs are no-ops."""
    n_pairs = 8 * len(block.payload) // PAIR_BITS
    pairs = unpack_fields(block.payload, PAIR_BITS, n_pairs)
    runs = (pairs & np.uint64(MAX_RUN)).astype(np.int64)
    vals = (pairs >> np.uint64(RUN_BITS)).astype(np.uint16)
    has_value = vals != 0
    advance = runs + has_value
    total = int(advance.sum())
    if total != block.original_words:
        raise CorruptBlockError(
            f"stream decodes to {total} words, block declares {block.original_words}"
        )
    out = np.zeros(total, dtype=np.uint16)
    out[np.cumsum(advance)[has_value] - 1] = vals[has_value]
    return out


def zrlc_pair_count(words) -> int:
    w = _as_words(words)
    nz = np.flatnonzero(w)
    gaps = np.diff(nz, prepend=-1) - 1
    tail = len(w) - 1 - (nz[-1] if len(nz) else -1)
    return int((gaps // MAX_RUN).sum()) + len(nz) + tail // MAX_RUN + (1 if tail % MAX_RUN else 0)


# --------------------------------------------------------------------------
# raw and dispatch
# --------------------------------------------------------------------------


def raw_encode(words) -> CompressedBlock:
    w = _as_words(words)
    return CompressedBlock("raw", len(w), w.astype("<u2").tobytes())


def raw_decode(block: CompressedBlock) -> np.ndarray:
    need = WORD_BYTES * block.original_words
    if len(block.payload) < need:
        raise CorruptBlockError(f"raw payload has {len(block.payload)} bytes, need {need}")
    return np.frombuffer(block.payload, dtype="<u2", count=block.original_words).astype(np.uint16)


_ENCODERS = {"bitmask": bitmask_encode, "zrlc": zrlc_encode, "raw": raw_encode}
_DECODERS = {"bitmask": bitmask_decode, "zrlc": zrlc_decode, "raw": raw_decode}


def _check_codec(codec: str) -> None:
    if codec not in _ENCODERS:
        raise ValueError(f"unknown codec {codec!r}; choose from {', '.join(CODECS)}")


def encode(codec: str, words) -> CompressedBlock:
    _check_codec(codec)
    return _ENCODERS[codec](words)


def decode(block: CompressedBlock) -> np.ndarray:
    _check_codec(block.codec)
    return _DECODERS[block.codec](block)


def compressed_size_bytes(codec: str, words) -> int:
    """Encoded size computed without building the payload."""
    _check_codec(codec)
    w = _as_words(words)
    if codec == "raw":
        return WORD_BYTES * len(w)
    if codec == "bitmask":
        return math.ceil(len(w) / 8) + WORD_BYTES * int(np.count_nonzero(w))
    return math.ceil(zrlc_pair_count(w) * PAIR_BITS / 8)


def compressed_size_lines(codec: str, words, cache_line_bytes: int = CACHE_LINE_BYTES) -> int:
    return math.ceil(compressed_size_bytes(codec, words) / cache_line_bytes)
