"""Tiled-fetch DRAM traffic model.

Every output tile fetches its input window for one channel group at a time
(``platform.tile_channels`` channels).  Whole subtensors are fetched even
when the window only overlaps them partially; metadata records of every
touched super-block are fetched per tile; nothing is cached between tiles.
The uncompressed baseline reads the same windows from a channel-blocked
layout in which every pixel's 8-channel block is one cache line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import (
    CACHE_LINE_BYTES,
    CHANNEL_BLOCK,
    WORD_BYTES,
    ConfigurationError,
    FeatureMap,
    LayerConfig,
    PlatformProfile,
    zero_fraction,
)
from .division import (
    DivisionMode,
    build_grid,
    output_extent,
    segment_range,
    tile_counts,
)
from .layout import (
    pack,
    record_bits,
    stored_sizes,
    superblock_geometry,
)

LINE_BITS = 8 * CACHE_LINE_BYTES


@dataclass(frozen=True)
class TileConfig:
    """Input tile (with halo) and the output tile it produces."""

    in_h: int
    in_w: int
    channels: int
    out_h: int
    out_w: int

    @property
    def words(self) -> int:
        return self.in_h * self.in_w * self.channels

    def __str__(self):
        return f"{self.in_h}x{self.in_w}x{self.channels}"


def derive_tile_config(layer: LayerConfig, platform: PlatformProfile) -> TileConfig:
    """Pick the output tile for ``layer`` on ``platform``.

    The tile step in input space, ``(s * t_h) x (s * t_w) x channels``, may
    use at most a quarter of the working-set budget (the rest covers double
    buffering and halo), and the full input tile must fit the budget.  Among
    the largest steps, the squarest wins, then the wider; ``t_w`` is a
    multiple of 8.
    """
    s, reach = layer.stride, 2 * layer.halo + 1
    ch = platform.tile_channels
    step_budget = platform.max_tile_words // 4
    best = None
    t_w = CHANNEL_BLOCK
    while (s * t_w) * s * ch <= step_budget:
        t_h_max = step_budget // (s * s * t_w * ch)
        for t_h in range(t_h_max, 0, -1):
            in_h, in_w = (t_h - 1) * s + reach, (t_w - 1) * s + reach
            if in_h * in_w * ch <= platform.max_tile_words:
                key = (s * t_h * s * t_w, -abs(t_w - t_h), t_w, t_h)
                if best is None or key > best[0]:
                    best = (key, t_h, t_w)
                break
        t_w += CHANNEL_BLOCK
    if best is None:
        raise ConfigurationError(
            f"no output tile with width a multiple of {CHANNEL_BLOCK} fits "
            f"{platform.max_tile_words} words for k={layer.half_kernel}, s={s}, d={layer.dilation}"
        )
    _, t_h, t_w = best
    return TileConfig((t_h - 1) * s + reach, (t_w - 1) * s + reach, ch, t_h, t_w)


def layer_for(
    half_kernel: int, stride: int, dilation: int, channels: int, platform: PlatformProfile
) -> LayerConfig:
    """Layer geometry with the output tile chosen for ``platform``."""
    probe = LayerConfig(half_kernel, stride, dilation, in_channels=channels)
    tile = derive_tile_config(probe, platform)
    return LayerConfig(half_kernel, stride, dilation, tile.out_h, tile.out_w, channels)


@dataclass(frozen=True)
class FetchReport:
    network: str
    layer: str
    platform: str
    mode: str
    codec: str
    payload_bytes: int
    metadata_bytes: int
    baseline_bytes: int
    optimal: float

    @property
    def saving_no_overhead(self) -> float:
        return 1.0 - self.payload_bytes / self.baseline_bytes

    @property
    def saving_with_overhead(self) -> float:
        return 1.0 - (self.payload_bytes + self.metadata_bytes) / self.baseline_bytes


def _channel_groups(channel_blocks: int, platform: PlatformProfile) -> list[tuple[int, int]]:
    g = platform.tile_channels // CHANNEL_BLOCK
    return [(c, min(c + g, channel_blocks)) for c in range(0, channel_blocks, g)]


def _axis_windows(extent: int, tile: int, layer: LayerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Clipped window bounds of every tile along one axis."""
    s, reach = layer.stride, layer.halo
    n_out = output_extent(extent, s)
    first = np.arange(0, n_out, tile)
    last = np.minimum(first + tile, n_out) - 1
    return np.maximum(first * s - reach, 0), np.minimum(last * s + reach + 1, extent)


def simulate_layer(
    fmap: FeatureMap,
    layer: LayerConfig,
    platform: PlatformProfile,
    mode: DivisionMode,
    codec: str,
    *,
    network: str = "",
    name: str = "",
    baseline_exact: bool = False,
) -> FetchReport:
    """Account payload, metadata and baseline traffic over every tile."""
    h, w, c = fmap.dims
    if c != layer.in_channels:
        raise ValueError(f"map has {c} channels, layer expects {layer.in_channels}")
    grid = build_grid(fmap.dims, mode)
    geo = superblock_geometry(grid)
    sizes, _ = stored_sizes(fmap, grid, codec)
    unit = CACHE_LINE_BYTES if mode.aligned else 1
    groups = _channel_groups(grid.channel_blocks, platform)

    wy0, wy1 = _axis_windows(h, layer.out_tile_h, layer)
    wx0, wx1 = _axis_windows(w, layer.out_tile_w, layer)
    ys0, ys1 = segment_range(grid.y_cuts, wy0, wy1)
    xs0, xs1 = segment_range(grid.x_cuts, wx0, wx1)

    payload = 0
    for g0, g1 in groups:
        summed = sizes[:, :, g0:g1].sum(axis=2)
        prefix = np.zeros((grid.ny + 1, grid.nx + 1), dtype=np.int64)
        prefix[1:, 1:] = summed.cumsum(0).cumsum(1)
        per_tile = (
            prefix[ys1[:, None], xs1[None, :]] - prefix[ys0[:, None], xs1[None, :]]
            - prefix[ys1[:, None], xs0[None, :]] + prefix[ys0[:, None], xs0[None, :]]
        )
        payload += int(per_tile.sum()) * unit

    metadata = CACHE_LINE_BYTES * _metadata_lines(geo, record_bits(mode), ys0, ys1, xs0, xs1, groups)

    areas = int(((wy1 - wy0)[:, None] * (wx1 - wx0)[None, :]).sum())
    if baseline_exact:
        baseline = areas * c * WORD_BYTES
    else:
        baseline = areas * grid.channel_blocks * CACHE_LINE_BYTES

    return FetchReport(
        network=network, layer=name, platform=platform.name, mode=mode.name, codec=codec,
        payload_bytes=payload, metadata_bytes=metadata, baseline_bytes=baseline,
        optimal=zero_fraction(fmap),
    )


def _metadata_lines(geo, rbits, ys0, ys1, xs0, xs1, groups) -> int:
    """Cache lines of metadata read, summed over every (tile, channel group)."""
    sby0, sby1 = geo.sb_y[ys0], geo.sb_y[ys1 - 1] + 1
    sbx0, sbx1 = geo.sb_x[xs0], geo.sb_x[xs1 - 1] + 1
    total = 0
    for g0, g1 in groups:
        cbs = np.arange(g0, g1)
        for ty in range(len(ys0)):
            rows = np.arange(sby0[ty], sby1[ty])
            # one run of consecutive records per (channel block, row), for every tx at once
            start = geo.record(rows[None, :, None], sbx0[None, None, :], cbs[:, None, None])
            stop = geo.record(rows[None, :, None], sbx1[None, None, :] - 1, cbs[:, None, None]) + 1
            first = (start * rbits) // LINE_BITS
            last = (stop * rbits - 1) // LINE_BITS
            lines = (last - first + 1).reshape(-1, len(sbx0))
            shared = first.reshape(-1, len(sbx0))[1:] == last.reshape(-1, len(sbx0))[:-1]
            total += int(lines.sum()) - int(shared.sum())
    return total


# --------------------------------------------------------------------------
# Brute-force oracle
# --------------------------------------------------------------------------


def _receptive_bounds(first: int, count: int, extent: int, layer: LayerConfig) -> tuple[int, int]:
    """Span of every input tap used by ``count`` outputs from ``first``, clipped to the map.

    The fetch is one contiguous box, so gaps between dilated taps near an
    edge are still read.
    """
    taps = [
        (first + j) * layer.stride + (i - layer.half_kernel) * layer.dilation
        for j in range(count)
        for i in range(layer.kernel)
    ]
    return max(min(taps), 0), min(max(taps) + 1, extent)


def brute_force_oracle(
    fmap: FeatureMap,
    layer: LayerConfig,
    platform: PlatformProfile,
    mode: DivisionMode,
    codec: str,
    *,
    network: str = "",
    name: str = "",
    baseline_exact: bool = False,
) -> FetchReport:
    """Recompute :func:`simulate_layer` by marking every byte read.

    Materializes the packed arena and the metadata bit array, enumerates
    receptive fields tap by tap, tests every region against every window and
    counts touched cache lines (or exact bytes for compact packing).
    Intended for small maps only.
    """
    h, w, c = fmap.dims
    grid = build_grid(fmap.dims, mode)
    layout = pack(fmap, grid, codec)
    n_ty, n_tx = tile_counts(layer, fmap.dims)
    oh, ow = output_extent(h, layer.stride), output_extent(w, layer.stride)
    groups = _channel_groups(grid.channel_blocks, platform)

    payload = metadata = baseline = 0
    for ty in range(n_ty):
        fy = ty * layer.out_tile_h
        y0, y1 = _receptive_bounds(fy, min(layer.out_tile_h, oh - fy), h, layer)
        for tx in range(n_tx):
            fx = tx * layer.out_tile_w
            x0, x1 = _receptive_bounds(fx, min(layer.out_tile_w, ow - fx), w, layer)
            for g0, g1 in groups:
                arena = np.zeros(len(layout.payload), dtype=bool)
                meta = np.zeros(8 * len(layout.metadata_bits), dtype=bool)
                for rid, (ry0, ry1, rx0, rx1, cb) in enumerate(grid.regions):
                    if not g0 <= cb < g1:
                        continue
                    if ry0 >= y1 or ry1 <= y0 or rx0 >= x1 or rx1 <= x0:
                        continue
                    offset, length = layout.directory[rid]
                    arena[offset : offset + length] = True
                    rec = int(layout.region_record[rid])
                    meta[rec * layout.record_bits : (rec + 1) * layout.record_bits] = True
                if mode.aligned:
                    payload += CACHE_LINE_BYTES * _touched_lines(arena, CACHE_LINE_BYTES)
                else:
                    payload += int(arena.sum())
                metadata += CACHE_LINE_BYTES * _touched_lines(meta, LINE_BITS)

                # uncompressed layout: [channel block][y][x][8 channels]
                touched = np.zeros(grid.channel_blocks * h * w * CACHE_LINE_BYTES, dtype=bool)
                for cb in range(g0, g1):
                    lo, hi = grid.channel_range(cb)
                    for y in range(y0, y1):
                        row = ((cb * h + y) * w + np.arange(x0, x1)) * CACHE_LINE_BYTES
                        for ch in range(lo, hi):
                            byte = row + (ch - lo) * WORD_BYTES
                            touched[byte] = True
                            touched[byte + 1] = True
                if baseline_exact:
                    baseline += int(touched.sum())
                else:
                    baseline += CACHE_LINE_BYTES * _touched_lines(touched, CACHE_LINE_BYTES)

    return FetchReport(
        network=network, layer=name, platform=platform.name, mode=mode.name, codec=codec,
        payload_bytes=payload, metadata_bytes=metadata, baseline_bytes=baseline,
        optimal=float((fmap.data == 0).mean()),
    )


def _touched_lines(marks: np.ndarray, line: int) -> int:
    if not marks.any():
        return 0
    return int(np.unique(np.flatnonzero(marks) // line).size)


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------


def geometric_mean_saving(savings: Sequence[float]) -> float:
    """Geometric mean of the remaining traffic, turned back into a saving."""
    if len(savings) == 0:
        raise ValueError("cannot aggregate an empty list")
    remaining = [1.0 - s for s in savings]
    if any(r == 0 for r in remaining):
        return 1.0
    return 1.0 - math.exp(sum(math.log(r) for r in remaining) / len(remaining))


@dataclass(frozen=True)
class SummaryRow:
    platform: str
    mode: str
    codec: str
    layers: int
    saving_no_overhead: float
    saving_with_overhead: float


def aggregate(reports: Iterable[FetchReport]) -> list[SummaryRow]:
    """Geometric-mean savings per (platform, mode, codec), sorted by key."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    buckets: dict[tuple[str, str, str], list[FetchReport]] = {}
    for r in reports:
        buckets.setdefault((r.platform, r.mode, r.codec), []).append(r)
    rows = []
    for key in sorted(buckets):
        group = buckets[key]
        rows.append(SummaryRow(
            *key, layers=len(group),
            saving_no_overhead=geometric_mean_saving([r.saving_no_overhead for r in group]),
            saving_with_overhead=geometric_mean_saving([r.saving_with_overhead for r in group]),
        ))
    return rows
