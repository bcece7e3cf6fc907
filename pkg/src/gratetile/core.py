"""Feature maps, layer and platform descriptions, and the benchmark catalog.

A feature map is a dense ``H x W x C`` tensor of 16-bit words stored
row-major (height, then width, then channel).  Only the zero pattern matters
to the rest of the package; values are opaque payload.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WORD_BYTES = 2
CACHE_LINE_BYTES = 16
CHANNEL_BLOCK = 8

MAGIC = b"GRTT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
# Guard against headers that would make us allocate absurd amounts of memory.
MAX_MAP_WORDS = 1 << 31


class GrateTileError(Exception):
    """Base class for errors raised by this package."""


class FeatureMapFormatError(GrateTileError):
    """A feature-map file does not follow the on-disk format."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigurationError(GrateTileError):
    """A layer/platform combination admits no valid simulation setup."""


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Immutable ``H x W x C`` map of uint16 words (0 means "zero")."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.uint16, copy=True)
        if data.ndim != 3:
            raise ValueError(f"feature map must be 3-D (H, W, C), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"feature map dimensions must be >= 1, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_words(cls, dims: Sequence[int], words: Iterable[int]) -> "FeatureMap":
        h, w, c = dims
        flat = np.asarray(list(words) if not isinstance(words, np.ndarray) else words)
        if flat.size != h * w * c:
            raise ValueError(f"expected {h * w * c} words for {h}x{w}x{c}, got {flat.size}")
        return cls(flat.reshape(h, w, c))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.dims, self.data.tobytes()))

    def __repr__(self):
        return f"FeatureMap({self.height}x{self.width}x{self.channels}, zero_fraction={zero_fraction(self):.3f})"


@dataclass(frozen=True)
class LayerConfig:
    """Convolution geometry plus the output tile processed per fetch.

    The kernel spans ``2 * half_kernel + 1`` taps spaced ``dilation`` apart.
    """

    half_kernel: int
    stride: int = 1
    dilation: int = 1
    out_tile_h: int = 8
    out_tile_w: int = 8
    in_channels: int = CHANNEL_BLOCK

    def __post_init__(self):
        if self.half_kernel < 0:
            raise ValueError(f"half_kernel must be >= 0, got {self.half_kernel}")
        for name in ("stride", "dilation", "out_tile_h", "out_tile_w", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.in_channels % CHANNEL_BLOCK:
            raise ValueError(
                f"in_channels must be a multiple of {CHANNEL_BLOCK}, got {self.in_channels}"
            )

    @property
    def kernel(self) -> int:
        return 2 * self.half_kernel + 1

    @property
    def halo(self) -> int:
        """Reach of the kernel on each side of an output centre, in input elements."""
        return self.half_kernel * self.dilation

    def input_tile(self) -> tuple[int, int]:
        """Input extent (h, w) needed by one full output tile."""
        reach = 2 * self.halo + 1
        return (
            (self.out_tile_h - 1) * self.stride + reach,
            (self.out_tile_w - 1) * self.stride + reach,
        )


@dataclass(frozen=True)
class PlatformProfile:
    """Accelerator working-set budget and fetch granularity.

    ``tile_channels`` is how many channels one tile fetch covers; it is a
    multiple of the 8-word channel block.
    """

    name: str
    max_tile_words: int
    tile_channels: int = CHANNEL_BLOCK
    cache_line_bytes: int = CACHE_LINE_BYTES
    word_bytes: int = WORD_BYTES

    def __post_init__(self):
        if self.cache_line_bytes != CHANNEL_BLOCK * self.word_bytes:
            raise ValueError("cache line must hold exactly one 8-word channel block")
        if self.tile_channels % CHANNEL_BLOCK or self.tile_channels < CHANNEL_BLOCK:
            raise ValueError(f"tile_channels must be a positive multiple of {CHANNEL_BLOCK}")
        if self.max_tile_words < 1:
            raise ValueError("max_tile_words must be positive")


SMALL = PlatformProfile("small", max_tile_words=4096, tile_channels=8)
LARGE = PlatformProfile("large", max_tile_words=16384, tile_channels=16)
PLATFORMS = {p.name: p for p in (SMALL, LARGE)}


@dataclass(frozen=True)
class SparsityModel:
    """Recipe for a synthetic zero pattern.

    ``iid`` zeroes each word independently; ``blob`` zeroes discs of radius
    ``blob_radius`` (per channel) until the requested fraction is reached.
    """

    mode: str = "iid"
    zero_fraction: float = 0.7
    seed: int = 0
    blob_radius: int = 3

    def __post_init__(self):
        if self.mode not in ("iid", "blob"):
            raise ValueError(f"unknown sparsity mode {self.mode!r}")
        if not 0.0 <= self.zero_fraction <= 1.0:
            raise ValueError(f"zero_fraction must be in [0, 1], got {self.zero_fraction}")
        if self.blob_radius < 0:
            raise ValueError(f"blob_radius must be >= 0, got {self.blob_radius}")


# --------------------------------------------------------------------------
# Generation and statistics
# --------------------------------------------------------------------------


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int]:
    if len(dims) != 3:
        raise ValueError(f"dims must be (H, W, C), got {dims!r}")
    h, w, c = (int(v) for v in dims)
    if min(h, w, c) < 1:
        raise ValueError(f"dims must all be >= 1, got {dims!r}")
    return h, w, c


def generate_feature_map(dims: Sequence[int], model: SparsityModel) -> FeatureMap:
    """Build a synthetic map; a pure function of ``(dims, model)``.

    Nonzero words are uniform on [1, 65535].
    """
    h, w, c = _check_dims(dims)
    if not 0.0 <= model.zero_fraction <= 1.0:
        raise ValueError(f"zero_fraction must be in [0, 1], got {model.zero_fraction}")
    rng = np.random.default_rng(model.seed)
    data = rng.integers(1, 1 << 16, size=(h, w, c), dtype=np.uint16)
    if model.mode == "iid":
        data[rng.random((h, w, c)) < model.zero_fraction] = 0
    else:
        _zero_blobs(data, model, rng)
    return FeatureMap(data)


def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def _zero_blobs(data: np.ndarray, model: SparsityModel, rng: np.random.Generator) -> None:
    h, w, c = data.shape
    total = data.size
    target = int(round(model.zero_fraction * total))
    if target == 0:
        return
    if target == total:
        data[...] = 0
        return
    dy, dx = _disc_offsets(model.blob_radius)
    zero = np.zeros((h, w, c), dtype=bool)
    count = 0
    # Past this many discs coverage is ~1 - e^-8 of the map; finish off the stragglers directly.
    max_discs = int(8 * total / len(dy)) + 1
    placed = 0
    while count < target and placed < max_discs:
        batch = min(4096, max_discs - placed)
        ys = rng.integers(0, h, size=batch)
        xs = rng.integers(0, w, size=batch)
        cs = rng.integers(0, c, size=batch)
        for y, x, ch in zip(ys, xs, cs):
            py = y + dy
            px = x + dx
            inside = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            py, px = py[inside], px[inside]
            fresh = ~zero[py, px, ch]
            py, px = py[fresh], px[fresh]
            need = target - count
            if len(py) >= need:
                zero[py[:need], px[:need], ch] = True
                count = target
                break
            zero[py, px, ch] = True
            count += len(py)
        placed += batch
    if count < target:
        rest = np.flatnonzero(~zero.ravel())
        zero.ravel()[rng.permutation(rest)[: target - count]] = True
    data[zero] = 0


def zero_fraction(fmap: FeatureMap) -> float:
    """Fraction of words equal to zero (the "optimal" bandwidth reduction)."""
    return float(np.count_nonzero(fmap.data == 0)) / fmap.size


# --------------------------------------------------------------------------
# File IO
# --------------------------------------------------------------------------


def store_feature_map(fmap: FeatureMap, path) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, WORD_BYTES, fmap.height, fmap.width, fmap.channels)
    Path(path).write_bytes(header + fmap.data.astype("<u2").tobytes())


def decode_feature_map(blob: bytes) -> FeatureMap:
    """Parse the binary feature-map format from memory."""
    if not MAGIC.startswith(bytes(blob[:4])):
        raise FeatureMapFormatError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}", 0)
    if len(blob) < _HEADER.size:
        raise FeatureMapFormatError(
            f"truncated header: need {_HEADER.size} bytes, file has {len(blob)}", len(blob)
        )
    _, version, word_bytes, h, w, c = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise FeatureMapFormatError(f"unsupported format version {version}", 4)
    if word_bytes != WORD_BYTES:
        raise FeatureMapFormatError(f"unsupported word size {word_bytes} bytes", 6)
    if min(h, w, c) < 1:
        raise FeatureMapFormatError(f"invalid dimensions {h}x{w}x{c}", 8)
    words = h * w * c
    if words > MAX_MAP_WORDS:
        raise FeatureMapFormatError(f"dimension overflow: {h}x{w}x{c} = {words} words", 8)
    payload = len(blob) - _HEADER.size
    need = words * WORD_BYTES
    if payload < need:
        raise FeatureMapFormatError(
            f"truncated payload: header declares {words} words, found {payload // WORD_BYTES}",
            len(blob),
        )
    if payload > need:
        raise FeatureMapFormatError(f"{payload - need} trailing bytes after payload", _HEADER.size + need)
    data = np.frombuffer(blob, dtype="<u2", count=words, offset=_HEADER.size)
    return FeatureMap(data.reshape(h, w, c))


def load_feature_map(path) -> FeatureMap:
    return decode_feature_map(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Benchmark catalog
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    network: str
    layer: str
    height: int
    width: int
    channels: int
    kernel: int
    stride: int
    dilation: int = 1

    @property
    def half_kernel(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def key(self) -> str:
        return f"{self.network}/{self.layer}"


def parse_catalog(text: str) -> list[CatalogEntry]:
    """Parse ``network,layer,H,W,C,kernel,stride,dilation`` lines.

    ``#`` starts a comment.  Channel counts are rounded up to a multiple of 8.
    """
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (7, 8):
            raise ValueError(f"catalog line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            h, w, c, kernel, stride = (int(v) for v in parts[2:7])
            dilation = int(parts[7]) if len(parts) == 8 else 1
        except ValueError as exc:
            raise ValueError(f"catalog line {lineno}: {exc}") from None
        if min(h, w, c, kernel, stride, dilation) < 1 or kernel % 2 == 0:
            raise ValueError(f"catalog line {lineno}: invalid layer shape {parts[2:]}")
        c = CHANNEL_BLOCK * math.ceil(c / CHANNEL_BLOCK)
        entries.append(CatalogEntry(parts[0], parts[1], h, w, c, kernel, stride, dilation))
    return entries


def layer_catalog(path=None) -> list[CatalogEntry]:
    """Load the bundled catalog, or a user-supplied one from ``path``."""
    if path is None:
        text = resources.files("gratetile").joinpath("data/catalog.csv").read_text()
    else:
        text = Path(path).read_text()
    return parse_catalog(text)
