"""Independent checks shared by the unit and acceptance suites."""
import numpy as np

from gratetile.division import (
    DivisionMode,
    build_grid,
    grate_config,
    reduce_config,
    subtensors_in_window,
    tile_counts,
    window_for_tile,
)
from gratetile.core import LayerConfig


def residue_cuts(period, cuts, extent):
    """Cut positions by direct enumeration of every index."""
    pos = {p for p in range(extent) if p % period in cuts}
    return sorted(pos | {0, extent})


def interior_tiles(layer, dims):
    n_ty, n_tx = tile_counts(layer, dims)
    for ty in range(n_ty):
        for tx in range(n_tx):
            raw = window_for_tile(layer, (ty, tx), dims, clip=False)
            full_out = window_for_tile(layer, (ty, tx), dims).height
            inside = raw.y0 >= 0 and raw.x0 >= 0 and raw.y1 <= dims[0] and raw.x1 <= dims[1]
            nominal = (raw.y1 - raw.y0, raw.x1 - raw.x0) == layer.input_tile()
            if inside and nominal and full_out:
                yield ty, tx, raw


def containment_violations(k, s, d, t_w, t_h, reduce_to=None):
    """Count interior windows that are not exact unions of grid regions.

    Two independent checks per window: the grid's own containment labels,
    and window edges against brute-force enumerated cut positions.
    """
    cfg = grate_config(k, s, d, t_w)
    if reduce_to is not None:
        cfg = reduce_config(cfg, reduce_to)
    layer = LayerConfig(k, s, d, t_h, t_w)
    h_in, w_in = layer.input_tile()
    dims = (h_in + 3 * s * t_h, w_in + 3 * s * t_w, 8)
    grid = build_grid(dims, DivisionMode.grate(cfg))
    ys = set(residue_cuts(cfg.period, cfg.cuts, dims[0]))
    xs = set(residue_cuts(cfg.period, cfg.cuts, dims[1]))
    bad = checked = 0
    for _, _, win in interior_tiles(layer, dims):
        checked += 1
        labels = {c for _, c in subtensors_in_window(grid, win)}
        edges_ok = {win.y0, win.y1} <= ys and {win.x0, win.x1} <= xs
        if labels != {"full"} or not edges_ok:
            bad += 1
    return bad, checked


def covered_exactly_once(grid):
    count = np.zeros(grid.dims, dtype=np.int64)
    for y0, y1, x0, x1, cb in grid.regions:
        c0, c1 = grid.channel_range(cb)
        count[y0:y1, x0:x1, c0:c1] += 1
    return bool((count == 1).all())
