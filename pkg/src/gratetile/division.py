"""Uneven subtensor division derived from convolution access boundaries.

Consecutive output tiles of a layer fetch input windows whose left and right
edges advance by the same step (``stride * out_tile``).  Cutting the feature
map at every edge position, i.e. at two residues modulo that step, yields a
grid in which every window is an exact union of whole subtensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .core import CHANNEL_BLOCK, LayerConfig


@dataclass(frozen=True)
class GrateConfig:
    """Cut residues ``cuts`` modulo ``period`` (one or two of them)."""

    period: int
    cuts: tuple[int, ...]
    derivation: Optional[tuple[int, int, int, int]] = field(default=None, compare=False)  # (k, s, d, t_w)

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        cuts = tuple(sorted(set(int(c) for c in self.cuts)))
        if not 1 <= len(cuts) <= 2:
            raise ValueError(f"a config has one or two cuts, got {cuts}")
        if any(not 0 <= c < self.period for c in cuts):
            raise ValueError(f"cuts {cuts} must lie in [0, {self.period})")
        object.__setattr__(self, "cuts", cuts)

    def segment_lengths(self) -> tuple[int, ...]:
        """Cyclic gaps between consecutive cuts, starting at the smallest cut."""
        if len(self.cuts) == 1:
            return (self.period,)
        a, b = self.cuts
        return (b - a, self.period - (b - a))

    def __str__(self):
        return "{" + ", ".join(map(str, self.cuts)) + f"}} (mod {self.period})"


def grate_config(k: int, s: int, d: int, t_w: int) -> GrateConfig:
    """Boundary set for half-kernel ``k``, stride ``s``, dilation ``d``, tile width ``t_w``."""
    if k < 0 or min(s, d, t_w) < 1:
        raise ValueError(f"invalid layer parameters k={k}, s={s}, d={d}, t_w={t_w}")
    n = s * t_w
    return GrateConfig(n, ((-k * d) % n, (k * d - s + 1) % n), derivation=(k, s, d, t_w))


def reduce_config(cfg: GrateConfig, n: int) -> GrateConfig:
    """Re-express ``cfg`` modulo a divisor ``n`` of its period."""
    if n < 1 or cfg.period % n:
        raise ValueError(f"{n} does not divide the period {cfg.period}")
    return GrateConfig(n, tuple(c % n for c in cfg.cuts), derivation=cfg.derivation)


def spatial_cuts(cfg: GrateConfig, extent: int) -> np.ndarray:
    """Sorted cut positions in ``[0, extent]``, including both ends."""
    if extent < 1:
        raise ValueError(f"extent must be >= 1, got {extent}")
    starts = [np.arange(c, extent, cfg.period) for c in cfg.cuts]
    return np.unique(np.concatenate(starts + [np.array([0, extent])])).astype(np.int64)


# --------------------------------------------------------------------------
# Division modes and grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DivisionMode:
    """How a map is cut into subtensors.

    ``uniform`` uses n x n x 8 blocks, ``grate`` the uneven cuts of ``cfg``,
    and ``compact`` is 1 x 1 x 8 with byte-contiguous (unaligned) packing.
    """

    kind: str
    n: int = 8
    cfg: Optional[GrateConfig] = None
    channel_block: int = CHANNEL_BLOCK

    def __post_init__(self):
        if self.kind not in ("uniform", "grate", "compact"):
            raise ValueError(f"unknown division kind {self.kind!r}")
        if self.kind == "grate" and self.cfg is None:
            raise ValueError("grate mode needs a GrateConfig")
        if self.kind == "compact" and self.n != 1:
            raise ValueError("compact mode is always 1x1x8")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")

    @classmethod
    def uniform(cls, n: int) -> "DivisionMode":
        return cls("uniform", n=n)

    @classmethod
    def grate(cls, cfg: GrateConfig) -> "DivisionMode":
        return cls("grate", n=cfg.period, cfg=cfg)

    @classmethod
    def compact(cls) -> "DivisionMode":
        return cls("compact", n=1)

    @property
    def aligned(self) -> bool:
        return self.kind != "compact"

    @property
    def name(self) -> str:
        if self.kind == "grate":
            return f"grate{self.n}"
        if self.kind == "compact":
            return "u1"
        return f"u{self.n}" if self.n != 1 else "u1-aligned"

    def cut_config(self) -> GrateConfig:
        if self.kind == "grate":
            return self.cfg
        return GrateConfig(self.n, (0,))


MODE_NAMES = ("grate4", "grate8", "grate16", "u8", "u4", "u2", "u1")


def resolve_mode(name: str, layer: LayerConfig) -> Optional[DivisionMode]:
    """Turn a mode name into a concrete mode for ``layer``.

    Grate modes need their period to divide the tile step on both axes;
    ``None`` means the mode is not applicable to this layer's tiling.
    """
    if name == "u1":
        return DivisionMode.compact()
    if name.startswith("u") and name[1:].isdigit():
        return DivisionMode.uniform(int(name[1:]))
    if name.startswith("grate") and name[5:].isdigit():
        n = int(name[5:])
        step_h = layer.stride * layer.out_tile_h
        step_w = layer.stride * layer.out_tile_w
        if step_h % n or step_w % n:
            return None
        base = grate_config(layer.half_kernel, layer.stride, layer.dilation, layer.out_tile_w)
        return DivisionMode.grate(reduce_config(base, n))
    raise ValueError(f"unknown division mode {name!r}")


@dataclass(frozen=True, eq=False)
class SubtensorGrid:
    """Partition of an ``H x W x C`` map into boxes.

    Regions are numbered in raster order: y segment, then x segment, then
    channel block.
    """

    dims: tuple[int, int, int]
    mode: DivisionMode
    y_cuts: np.ndarray
    x_cuts: np.ndarray
    channel_blocks: int

    @property
    def ny(self) -> int:
        return len(self.y_cuts) - 1

    @property
    def nx(self) -> int:
        return len(self.x_cuts) - 1

    @property
    def n_regions(self) -> int:
        return self.ny * self.nx * self.channel_blocks

    def region_id(self, yi: int, xi: int, cb: int) -> int:
        return (yi * self.nx + xi) * self.channel_blocks + cb

    def region_index(self, rid: int) -> tuple[int, int, int]:
        if not 0 <= rid < self.n_regions:
            raise KeyError(f"no region {rid} in a grid of {self.n_regions}")
        yx, cb = divmod(rid, self.channel_blocks)
        yi, xi = divmod(yx, self.nx)
        return yi, xi, cb

    def box(self, rid: int) -> tuple[int, int, int, int, int]:
        """``(y0, y1, x0, x1, cb)`` for a region id."""
        yi, xi, cb = self.region_index(rid)
        return (
            int(self.y_cuts[yi]), int(self.y_cuts[yi + 1]),
            int(self.x_cuts[xi]), int(self.x_cuts[xi + 1]),
            cb,
        )

    def channel_range(self, cb: int) -> tuple[int, int]:
        c0 = cb * CHANNEL_BLOCK
        return c0, min(c0 + CHANNEL_BLOCK, self.dims[2])

    @cached_property
    def regions(self) -> list[tuple[int, int, int, int, int]]:
        return [self.box(rid) for rid in range(self.n_regions)]

    def region_words(self) -> np.ndarray:
        """Word count per region as a ``(ny, nx, channel_blocks)`` array."""
        hs = np.diff(self.y_cuts)
        ws = np.diff(self.x_cuts)
        cs = np.array([b - a for a, b in map(self.channel_range, range(self.channel_blocks))])
        return hs[:, None, None] * ws[None, :, None] * cs[None, None, :]


def build_grid(dims: Sequence[int], mode: DivisionMode) -> SubtensorGrid:
    h, w, c = (int(v) for v in dims)
    if min(h, w, c) < 1:
        raise ValueError(f"dims must all be >= 1, got {dims!r}")
    cfg = mode.cut_config()
    return SubtensorGrid(
        dims=(h, w, c),
        mode=mode,
        y_cuts=spatial_cuts(cfg, h),
        x_cuts=spatial_cuts(cfg, w),
        channel_blocks=math.ceil(c / mode.channel_block),
    )


# --------------------------------------------------------------------------
# Tiles and windows
# --------------------------------------------------------------------------


def output_extent(in_extent: int, stride: int) -> int:
    """Output positions along one axis; output ``j`` is centred on input ``j * stride``."""
    return (in_extent - 1) // stride + 1


def tile_counts(layer: LayerConfig, dims: Sequence[int]) -> tuple[int, int]:
    oh = output_extent(dims[0], layer.stride)
    ow = output_extent(dims[1], layer.stride)
    return math.ceil(oh / layer.out_tile_h), math.ceil(ow / layer.out_tile_w)


@dataclass(frozen=True)
class Window:
    """Half-open input box fetched for one output tile."""

    y0: int
    y1: int
    x0: int
    x1: int
    cb0: int
    cb1: int
    clipped: bool = False

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0


def _axis_window(index: int, tile: int, extent: int, layer: LayerConfig) -> tuple[int, int]:
    s, reach = layer.stride, layer.halo
    n_out = output_extent(extent, s)
    first = index * tile
    if index < 0 or first >= n_out:
        raise IndexError(f"tile {index} lies outside the {n_out}-wide output map")
    last = min(first + tile, n_out) - 1
    return first * s - reach, last * s + reach + 1


def window_for_tile(
    layer: LayerConfig, tile_index: tuple[int, int], dims: Sequence[int], clip: bool = True
) -> Window:
    """Input window of output tile ``(ty, tx)``.

    With ``clip=False`` the raw bounds are returned (they may be negative or
    run past the map); otherwise they are clipped to the map and ``clipped``
    records whether that changed anything.
    """
    h, w, c = dims
    ty, tx = tile_index
    y0, y1 = _axis_window(ty, layer.out_tile_h, h, layer)
    x0, x1 = _axis_window(tx, layer.out_tile_w, w, layer)
    cb1 = math.ceil(c / CHANNEL_BLOCK)
    if not clip:
        return Window(y0, y1, x0, x1, 0, cb1, clipped=False)
    cy0, cy1, cx0, cx1 = max(y0, 0), min(y1, h), max(x0, 0), min(x1, w)
    changed = (cy0, cy1, cx0, cx1) != (y0, y1, x0, x1)
    return Window(cy0, cy1, cx0, cx1, 0, cb1, clipped=changed)


def segment_range(cuts: np.ndarray, lo, hi):
    """Indices ``[first, stop)`` of the segments overlapping ``[lo, hi)``.

    Works elementwise on arrays of bounds.
    """
    first = np.searchsorted(cuts, lo, side="right") - 1
    stop = np.searchsorted(cuts, hi, side="left")
    return first, stop


def subtensors_in_window(grid: SubtensorGrid, window: Window) -> list[tuple[int, str]]:
    """Every region overlapping ``window`` with ``"full"`` or ``"partial"`` containment."""
    ys0, ys1 = segment_range(grid.y_cuts, window.y0, window.y1)
    xs0, xs1 = segment_range(grid.x_cuts, window.x0, window.x1)
    yi = np.arange(ys0, ys1)
    xi = np.arange(xs0, xs1)
    cb = np.arange(max(window.cb0, 0), min(window.cb1, grid.channel_blocks))
    y_in = (grid.y_cuts[yi] >= window.y0) & (grid.y_cuts[yi + 1] <= window.y1)
    x_in = (grid.x_cuts[xi] >= window.x0) & (grid.x_cuts[xi + 1] <= window.x1)
    rid = (yi[:, None, None] * grid.nx + xi[None, :, None]) * grid.channel_blocks + cb[None, None, :]
    full = np.broadcast_to((y_in[:, None] & x_in[None, :])[:, :, None], rid.shape)
    labels = np.where(full, "full", "partial").ravel().tolist()
    return list(zip(rid.ravel().tolist(), labels))
