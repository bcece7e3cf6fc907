"""Cache-line-aligned placement of compressed subtensors and their metadata.

Subtensors are grouped into super-blocks: one ``N x N x 8`` period of a
grate division, or a single subtensor for uniform divisions.  Each super-block
owns one metadata record holding a 28-bit cache-line pointer to its first
payload and, for grate divisions, the line count of every subtensor inside
it.  A subtensor is found in two steps: read the pointer, then skip the sizes
of the subtensors stored before it.

Records are bit-packed back to back, one raster plane (super-block row, then
column) per channel block.  A subtensor whose compressed form would need at least as
many lines as its raw form is stored raw; a stored size equal to the raw size
marks it, so no flag bit is needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from . import codec as codecs
from ._bits import pack_fields, unpack_fields
from .core import CACHE_LINE_BYTES, CHANNEL_BLOCK, WORD_BYTES, FeatureMap, GrateTileError
from .division import DivisionMode, GrateConfig, SubtensorGrid

ADDRESS_BITS = 32
POINTER_BITS = ADDRESS_BITS - int(math.log2(CACHE_LINE_BYTES))
COMPACT_POINTER_BITS = ADDRESS_BITS
KB_WORDS = 1024 // WORD_BYTES

# Record format shared by every grate mode: sized for the configurations
# of 3/7/11 and 5/9 kernels at period 8.
POPULAR_CONFIGS = (GrateConfig(8, (1, 7)), GrateConfig(8, (2, 6)))


class CapacityError(GrateTileError):
    """A pointer or size does not fit its metadata field."""


def superblock_slots(cfg: GrateConfig) -> list[tuple[int, int, int, int]]:
    """``(role_y, role_x, h, w)`` of each subtensor slot, in storage order.

    Role 0 is the segment starting at the smallest cut.  Slots are ordered by
    nominal area, then height; equal shapes keep raster order.
    """
    lengths = cfg.segment_lengths()
    roles = range(len(lengths))
    slots = [(ry, rx, lengths[ry], lengths[rx]) for ry in roles for rx in roles]
    return sorted(slots, key=lambda s: (s[2] * s[3], s[2]))


def size_field_widths(cfg: GrateConfig) -> tuple[int, ...]:
    """Bits per size field: enough to hold each slot's raw size in lines."""
    widths = []
    for _, _, h, w in superblock_slots(cfg):
        max_lines = math.ceil(h * w * CHANNEL_BLOCK * WORD_BYTES / CACHE_LINE_BYTES)
        widths.append(max_lines.bit_length())
    return tuple(widths)


SIZE_FIELD_BITS = max(sum(size_field_widths(c)) for c in POPULAR_CONFIGS)

_TABLE_MODES = {"grate4", "grate8", "grate16", "u8", "u4", "u2", "u1"}


def _mode_key(mode: Union[DivisionMode, str]) -> str:
    name = mode if isinstance(mode, str) else mode.name
    if name not in _TABLE_MODES:
        raise ValueError(f"no metadata accounting for mode {name!r}")
    return name


def metadata_bits_per_kb(mode: Union[DivisionMode, str]):
    """Nominal metadata bits per KB (512 words) of feature map."""
    name = _mode_key(mode)
    if name == "u1":
        bits, block_words = COMPACT_POINTER_BITS, CHANNEL_BLOCK
    elif name.startswith("grate"):
        n = int(name[5:])
        bits, block_words = POINTER_BITS + SIZE_FIELD_BITS, n * n * CHANNEL_BLOCK
    else:
        n = int(name[1:])
        bits, block_words = POINTER_BITS, n * n * CHANNEL_BLOCK
    value = bits * KB_WORDS / block_words
    return int(value) if value == int(value) else value


def metadata_percentage(mode: Union[DivisionMode, str]) -> float:
    return 100.0 * metadata_bits_per_kb(mode) / (8 * 1024)


def record_bits(mode: DivisionMode) -> int:
    """Width of one metadata record under ``mode``.

    Grate records keep the nominal layout unless a configuration's size
    fields outgrow it.
    """
    if mode.kind == "compact":
        return COMPACT_POINTER_BITS
    if mode.kind == "uniform":
        return POINTER_BITS
    return POINTER_BITS + max(SIZE_FIELD_BITS, sum(size_field_widths(mode.cfg)))


# --------------------------------------------------------------------------
# Super-block geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SuperBlockGeometry:
    """Maps grid segments to super-blocks and slots."""

    sb_y: np.ndarray  # super-block row of each y segment
    sb_x: np.ndarray
    slot: np.ndarray  # slot index per (y segment, x segment)
    n_sb_y: int
    n_sb_x: int
    channel_blocks: int
    n_slots: int

    @property
    def n_records(self) -> int:
        return self.n_sb_y * self.n_sb_x * self.channel_blocks

    def record(self, sby, sbx, cb):
        # Channel-block-major: a tile reads one channel group, so its records
        # must be contiguous within that group's plane.
        return (cb * self.n_sb_y + sby) * self.n_sb_x + sbx


def _axis_superblocks(cuts: np.ndarray, cfg: GrateConfig) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.period
    anchor = cfg.cuts[0]
    first_len = cfg.segment_lengths()[0]
    starts = cuts[:-1]
    sb = (starts + (n - anchor) % n) // n
    role = ((starts - anchor) % n >= first_len).astype(np.int64)
    return sb, role


def superblock_geometry(grid: SubtensorGrid) -> SuperBlockGeometry:
    if grid.mode.kind != "grate":
        return SuperBlockGeometry(
            sb_y=np.arange(grid.ny), sb_x=np.arange(grid.nx),
            slot=np.zeros((grid.ny, grid.nx), dtype=np.int64),
            n_sb_y=grid.ny, n_sb_x=grid.nx, channel_blocks=grid.channel_blocks, n_slots=1,
        )
    cfg = grid.mode.cfg
    sb_y, role_y = _axis_superblocks(grid.y_cuts, cfg)
    sb_x, role_x = _axis_superblocks(grid.x_cuts, cfg)
    slots = superblock_slots(cfg)
    table = np.zeros((2, 2), dtype=np.int64)
    for i, (ry, rx, _, _) in enumerate(slots):
        table[ry, rx] = i
    return SuperBlockGeometry(
        sb_y=sb_y, sb_x=sb_x, slot=table[role_y[:, None], role_x[None, :]],
        n_sb_y=int(sb_y[-1]) + 1, n_sb_x=int(sb_x[-1]) + 1,
        channel_blocks=grid.channel_blocks, n_slots=len(slots),
    )


# --------------------------------------------------------------------------
# Size accounting
# --------------------------------------------------------------------------


def region_nonzeros(fmap: FeatureMap, grid: SubtensorGrid) -> np.ndarray:
    """Nonzero count per region, shape ``(ny, nx, channel_blocks)``."""
    nz = (fmap.data != 0).astype(np.int64)
    nz = np.add.reduceat(nz, grid.y_cuts[:-1], axis=0)
    nz = np.add.reduceat(nz, grid.x_cuts[:-1], axis=1)
    return np.add.reduceat(nz, np.arange(0, grid.dims[2], CHANNEL_BLOCK), axis=2)


def region_words_view(fmap: FeatureMap, grid: SubtensorGrid, rid: int) -> np.ndarray:
    y0, y1, x0, x1, cb = grid.box(rid)
    c0, c1 = grid.channel_range(cb)
    return fmap.data[y0:y1, x0:x1, c0:c1].ravel()


def stored_sizes(fmap: FeatureMap, grid: SubtensorGrid, codec: str) -> tuple[np.ndarray, np.ndarray]:
    """Stored size and raw flag of every region, each ``(ny, nx, channel_blocks)``.

    Sizes are cache lines for aligned modes and bytes for compact packing.
    Computed from closed-form codec sizes, without encoding anything.
    """
    words = grid.region_words()
    raw_bytes = WORD_BYTES * words
    if codec == "raw":
        comp = raw_bytes
    elif codec == "bitmask":
        comp = -(-words // 8) + WORD_BYTES * region_nonzeros(fmap, grid)
    elif codec == "zrlc":
        comp = np.empty_like(words)
        flat = comp.reshape(-1)
        for rid in range(grid.n_regions):
            flat[rid] = codecs.compressed_size_bytes("zrlc", region_words_view(fmap, grid, rid))
    else:
        raise ValueError(f"unknown codec {codec!r}")
    if grid.mode.aligned:
        comp = -(-comp // CACHE_LINE_BYTES)
        raw = -(-raw_bytes // CACHE_LINE_BYTES)
    else:
        raw = raw_bytes
    is_raw = comp >= raw
    return np.where(is_raw, raw, comp), is_raw


# --------------------------------------------------------------------------
# Packing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SuperBlockMetadata:
    pointer: int
    sizes: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class PackedLayout:
    grid: SubtensorGrid
    codec: str
    geometry: SuperBlockGeometry
    record_bits: int
    widths: tuple[int, ...]
    metadata: tuple[SuperBlockMetadata, ...]
    metadata_bits: bytes
    payload: bytes
    directory: dict
    region_record: np.ndarray
    region_slot: np.ndarray
    raw_flags: np.ndarray
    end_pointer: int

    @property
    def aligned(self) -> bool:
        return self.grid.mode.aligned


def _region_tables(grid: SubtensorGrid, geo: SuperBlockGeometry) -> tuple[np.ndarray, np.ndarray]:
    yi, xi, cb = np.meshgrid(
        np.arange(grid.ny), np.arange(grid.nx), np.arange(grid.channel_blocks), indexing="ij"
    )
    record = geo.record(geo.sb_y[yi], geo.sb_x[xi], cb).reshape(-1)
    slot = geo.slot[yi, xi].reshape(-1)
    return record, slot


def pack(fmap: FeatureMap, grid: SubtensorGrid, codec: str) -> PackedLayout:
    """Compress every region independently and lay the arena out."""
    if fmap.dims != grid.dims:
        raise ValueError(f"grid is for {grid.dims}, map is {fmap.dims}")
    codecs._check_codec(codec)
    mode = grid.mode
    geo = superblock_geometry(grid)
    region_record, region_slot = _region_tables(grid, geo)
    order = np.lexsort((region_slot, region_record))
    unit = CACHE_LINE_BYTES if mode.aligned else 1

    chunks = []
    directory = {}
    raw_flags = np.zeros(grid.n_regions, dtype=bool)
    pointers = np.full(geo.n_records, -1, dtype=np.int64)
    sizes = np.zeros((geo.n_records, geo.n_slots), dtype=np.int64)
    cursor = 0  # in units
    for rid in order.tolist():
        words = region_words_view(fmap, grid, rid)
        block = codecs.encode(codec, words)
        raw_len = WORD_BYTES * len(words)
        stored_units = -(-block.size_bytes // unit)
        raw_units = -(-raw_len // unit)
        if stored_units >= raw_units:
            block = codecs.raw_encode(words)
            stored_units = raw_units
            raw_flags[rid] = True
        rec = region_record[rid]
        if pointers[rec] < 0:
            pointers[rec] = cursor
        sizes[rec, region_slot[rid]] = stored_units
        length = stored_units * unit
        chunks.append(block.payload.ljust(length, b"\0"))
        directory[rid] = (cursor * unit, length)
        cursor += stored_units

    pointer_bits = POINTER_BITS if mode.aligned else COMPACT_POINTER_BITS
    if cursor >= 1 << pointer_bits:
        raise CapacityError(f"arena of {cursor} units overflows a {pointer_bits}-bit pointer")
    rbits = record_bits(mode)
    if mode.kind == "grate":
        widths = size_field_widths(mode.cfg)
        over = sizes >= (1 << np.array(widths))[None, :]
        if over.any():
            raise CapacityError("a subtensor size exceeds its size field")
        pad = rbits - POINTER_BITS - sum(widths)
        field_widths = np.array([POINTER_BITS, *widths, pad])
        values = np.column_stack([pointers, sizes, np.zeros(geo.n_records, dtype=np.int64)])
        metadata = tuple(SuperBlockMetadata(int(p), tuple(int(v) for v in s)) for p, s in zip(pointers, sizes))
    else:
        widths = ()
        field_widths = np.array([pointer_bits])
        values = pointers[:, None]
        metadata = tuple(SuperBlockMetadata(int(p)) for p in pointers)
    bits = pack_fields(values.reshape(-1), np.tile(field_widths, geo.n_records))

    return PackedLayout(
        grid=grid, codec=codec, geometry=geo, record_bits=rbits, widths=widths,
        metadata=metadata, metadata_bits=bits, payload=b"".join(chunks), directory=directory,
        region_record=region_record, region_slot=region_slot, raw_flags=raw_flags,
        end_pointer=cursor,
    )


def decode_metadata(layout: PackedLayout) -> list[SuperBlockMetadata]:
    """Parse the packed metadata bits back into records."""
    geo = layout.geometry
    if layout.grid.mode.kind == "grate":
        pad = layout.record_bits - POINTER_BITS - sum(layout.widths)
        per = [POINTER_BITS, *layout.widths, pad]
    else:
        per = [layout.record_bits]
    fields = unpack_fields(layout.metadata_bits, np.tile(per, geo.n_records)).reshape(geo.n_records, len(per))
    if layout.grid.mode.kind == "grate":
        return [SuperBlockMetadata(int(f[0]), tuple(int(v) for v in f[1:-1])) for f in fields]
    return [SuperBlockMetadata(int(f[0])) for f in fields]


def locate(layout: PackedLayout, region_id: int) -> tuple[int, int]:
    """``(byte offset, byte length)`` of a region, resolved from metadata."""
    if not 0 <= region_id < layout.grid.n_regions:
        raise KeyError(f"no region {region_id}")
    rec = int(layout.region_record[region_id])
    md = layout.metadata[rec]
    if layout.grid.mode.kind == "grate":
        slot = int(layout.region_slot[region_id])
        offset = md.pointer + sum(md.sizes[:slot])
        return offset * CACHE_LINE_BYTES, md.sizes[slot] * CACHE_LINE_BYTES
    unit = CACHE_LINE_BYTES if layout.aligned else 1
    nxt = layout.metadata[rec + 1].pointer if rec + 1 < len(layout.metadata) else layout.end_pointer
    return md.pointer * unit, (nxt - md.pointer) * unit


def fetch_cost_lines(layout: PackedLayout, region_ids: Iterable[int]):
    """Cache lines moved to fetch ``region_ids`` whole.

    Compact packing is charged its exact bytes, as fractional lines.
    """
    total = sum(locate(layout, rid)[1] for rid in region_ids)
    if layout.aligned:
        return total // CACHE_LINE_BYTES
    return total / CACHE_LINE_BYTES


def unpack(layout: PackedLayout) -> FeatureMap:
    """Rebuild the feature map from the arena (inverse of :func:`pack`)."""
    grid = layout.grid
    out = np.zeros(grid.dims, dtype=np.uint16)
    unit = CACHE_LINE_BYTES if layout.aligned else 1
    for rid in range(grid.n_regions):
        y0, y1, x0, x1, cb = grid.box(rid)
        c0, c1 = grid.channel_range(cb)
        n = (y1 - y0) * (x1 - x0) * (c1 - c0)
        offset, length = locate(layout, rid)
        chunk = layout.payload[offset : offset + length]
        raw_len = -(-(WORD_BYTES * n) // unit) * unit
        name = "raw" if length == raw_len else layout.codec
        words = codecs.decode(codecs.CompressedBlock(name, n, chunk))
        out[y0:y1, x0:x1, c0:c1] = words.reshape(y1 - y0, x1 - x0, c1 - c0)
    return FeatureMap(out)
