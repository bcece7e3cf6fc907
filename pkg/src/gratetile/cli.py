"""Command-line driver: ``gen``, ``simulate`` and ``sweep``.

Exit codes: 0 ok, 2 argument error, 3 input or format error, 4 simulation
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .codec import CODECS
from .core import (
    PLATFORMS,
    ConfigurationError,
    FeatureMapFormatError,
    LayerConfig,
    SparsityModel,
    generate_feature_map,
    layer_catalog,
    load_feature_map,
    store_feature_map,
    zero_fraction,
)
from .division import MODE_NAMES, resolve_mode
from .simulator import FetchReport, derive_tile_config, geometric_mean_saving, simulate_layer

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3, 4

REPORT_COLUMNS = (
    "network", "layer", "platform", "mode", "codec", "payload_bytes", "metadata_bytes",
    "baseline_bytes", "saving_no_overhead", "saving_with_overhead", "optimal",
)
SUMMARY_COLUMNS = ("platform", "mode", "codec", "overhead", "layers", "saving")


class InputError(Exception):
    """Bad input data (exit 3)."""


# --------------------------------------------------------------------------
# argument types
# --------------------------------------------------------------------------


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected HxWxC with positive integers, got {text!r}")
    return dims


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {value}")
    return value


def _non_negative(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive(text: str) -> int:
    value = _non_negative(text)
    if value == 0:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _odd_kernel(text: str) -> int:
    value = _positive(text)
    if value % 2 == 0:
        raise argparse.ArgumentTypeError(f"kernel size must be odd, got {value}")
    return value


def _add_sparsity_args(p: argparse.ArgumentParser, pattern_flags: Sequence[str]) -> None:
    p.add_argument("--sparsity", type=_fraction, default=0.7, help="zero fraction in [0, 1]")
    p.add_argument("--seed", type=_non_negative, default=0)
    p.add_argument(*pattern_flags, dest="pattern", choices=("iid", "blob"), default="iid",
                   help="zero pattern")
    p.add_argument("--blob-radius", type=_non_negative, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gratetile", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic feature map file")
    gen.add_argument("--dims", type=_dims, required=True, help="HxWxC")
    _add_sparsity_args(gen, ("--mode", "--pattern"))
    gen.add_argument("--out", type=Path, required=True)

    sim = sub.add_parser("simulate", help="simulate one layer")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--map", type=Path, help="feature map file written by gen")
    src.add_argument("--synthetic", action="store_true", help="generate the map in memory")
    sim.add_argument("--dims", type=_dims, help="HxWxC (with --synthetic)")
    _add_sparsity_args(sim, ("--pattern",))
    sim.add_argument("--layer", help="catalog layer as network/layer")
    sim.add_argument("--catalog", type=Path, help="catalog CSV (default: bundled)")
    sim.add_argument("--kernel", type=_odd_kernel, help="kernel size, odd")
    sim.add_argument("--stride", type=_positive, default=1)
    sim.add_argument("--dilation", type=_positive, default=1)
    sim.add_argument("--platform", choices=(*PLATFORMS, "both"), default="both")
    sim.add_argument("--mode", choices=(*MODE_NAMES, "all"), default="all")
    sim.add_argument("--codec", choices=CODECS, default="bitmask")
    sim.add_argument("--csv", type=Path, help="write rows here instead of stdout")
    sim.add_argument("--baseline-exact", action="store_true",
                     help="charge the baseline exact bytes instead of whole lines")

    sw = sub.add_parser("sweep", help="run the full catalog matrix")
    sw.add_argument("--catalog", type=Path, help="catalog CSV (default: bundled)")
    sw.add_argument("--platform", choices=(*PLATFORMS, "both"), default="both")
    sw.add_argument("--mode", choices=(*MODE_NAMES, "all"), default="all")
    sw.add_argument("--codec", choices=CODECS, default="bitmask")
    _add_sparsity_args(sw, ("--pattern",))
    sw.add_argument("--seeds", type=_positive, default=3, help="maps per layer")
    sw.add_argument("--out", type=Path, required=True, help="output directory")
    sw.add_argument("--jobs", type=_positive, default=1, help="worker processes")
    sw.add_argument("--baseline-exact", action="store_true")
    return parser


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _platforms(name: str):
    return list(PLATFORMS.values()) if name == "both" else [PLATFORMS[name]]


def _modes(name: str) -> tuple[str, ...]:
    return MODE_NAMES if name == "all" else (name,)


def _ratio(x: float) -> str:
    return f"{x:.6f}"


def report_row(r: FetchReport) -> list:
    return [
        r.network, r.layer, r.platform, r.mode, r.codec, r.payload_bytes, r.metadata_bytes,
        r.baseline_bytes, _ratio(r.saving_no_overhead), _ratio(r.saving_with_overhead),
        _ratio(r.optimal),
    ]


def _write_csv(path: Optional[Path], header, rows) -> None:
    if path is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _model(args, seed: int) -> SparsityModel:
    return SparsityModel(args.pattern, args.sparsity, seed, args.blob_radius)


def _layer(half_kernel, stride, dilation, channels, platform) -> LayerConfig:
    """Layer with the platform's tile; ``ConfigurationError`` if it cannot be tiled."""
    try:
        probe = LayerConfig(half_kernel, stride, dilation, in_channels=channels)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    tile = derive_tile_config(probe, platform)
    return LayerConfig(half_kernel, stride, dilation, tile.out_h, tile.out_w, channels)


def _note(msg: str) -> None:
    print(f"note: {msg}", file=sys.stderr)


def _error(msg: str) -> None:
    print(f"gratetile: error: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    fmap = generate_feature_map(args.dims, _model(args, args.seed))
    store_feature_map(fmap, args.out)
    print(f"wrote {args.out}: {fmap.height}x{fmap.width}x{fmap.channels}, "
          f"zero fraction {zero_fraction(fmap):.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def _find_entry(catalog, key: str):
    for entry in catalog:
        if entry.key == key:
            return entry
    raise InputError(f"layer {key!r} is not in the catalog")


def cmd_simulate(args, parser: argparse.ArgumentParser) -> int:
    if (args.layer is None) == (args.kernel is None):
        parser.error("give exactly one of --layer or --kernel")
    if args.synthetic and args.dims is None and args.layer is None:
        parser.error("--synthetic needs --dims (or --layer to take dims from the catalog)")

    entry = None
    if args.layer is not None:
        try:
            entry = _find_entry(layer_catalog(args.catalog), args.layer)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read catalog: {exc}") from None

    if args.map is not None:
        try:
            fmap = load_feature_map(args.map)
        except OSError as exc:
            raise InputError(f"cannot read {args.map}: {exc.strerror or exc}") from None
    else:
        dims = args.dims if args.dims is not None else entry.dims
        fmap = generate_feature_map(dims, _model(args, args.seed))

    if entry is not None:
        if fmap.dims != entry.dims:
            raise InputError(f"map is {_fmt_dims(fmap.dims)} but {entry.key} expects {_fmt_dims(entry.dims)}")
        geometry = (entry.half_kernel, entry.stride, entry.dilation)
        network, name = entry.network, entry.layer
    else:
        geometry = ((args.kernel - 1) // 2, args.stride, args.dilation)
        network, name = "custom", f"k{args.kernel}s{args.stride}d{args.dilation}"

    rows = []
    for platform in _platforms(args.platform):
        layer = _layer(*geometry, fmap.channels, platform)
        for mode_name in _modes(args.mode):
            mode = resolve_mode(mode_name, layer)
            if mode is None:
                _note(f"{mode_name} skipped on {platform.name}: the fetched tile "
                      f"is smaller than one {mode_name[5:]}-period subtensor")
                continue
            report = simulate_layer(fmap, layer, platform, mode, args.codec, network=network,
                                    name=name, baseline_exact=args.baseline_exact)
            rows.append(report_row(report))
    _write_csv(args.csv, REPORT_COLUMNS, rows)
    return EXIT_OK


def _fmt_dims(dims) -> str:
    return "x".join(map(str, dims))


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


def layer_seed(base_seed: int, key: str, index: int) -> int:
    """Deterministic per-layer map seed, independent of process or hash salt."""
    return zlib.crc32(f"{base_seed}:{key}:{index}".encode())


@dataclass(frozen=True)
class SweepCell:
    """Seed-summed traffic of one (layer, platform, mode)."""

    network: str
    layer: str
    platform: str
    mode: str
    codec: str
    payload_bytes: int
    metadata_bytes: int
    baseline_bytes: int
    optimal: float

    def as_report(self) -> FetchReport:
        return FetchReport(self.network, self.layer, self.platform, self.mode, self.codec,
                           self.payload_bytes, self.metadata_bytes, self.baseline_bytes,
                           self.optimal)


def _sweep_entry(task):
    """All cells of one catalog entry; returns ``(cells, failures)``."""
    entry, platforms, modes, codec, model_args, seeds, baseline_exact = task
    pattern, sparsity, base_seed, radius = model_args
    maps = [
        generate_feature_map(entry.dims, SparsityModel(pattern, sparsity,
                                                       layer_seed(base_seed, entry.key, i), radius))
        for i in range(seeds)
    ]
    optimal = sum(zero_fraction(m) for m in maps) / seeds
    cells, failures = [], []
    for pname in platforms:
        platform = PLATFORMS[pname]
        try:
            layer = _layer(entry.half_kernel, entry.stride, entry.dilation, entry.channels, platform)
        except ConfigurationError as exc:
            failures.extend(f"{entry.key} {pname} {m}: {exc}" for m in modes)
            continue
        for mode_name in modes:
            mode = resolve_mode(mode_name, layer)
            if mode is None:
                continue
            try:
                reports = [
                    simulate_layer(m, layer, platform, mode, codec, baseline_exact=baseline_exact)
                    for m in maps
                ]
            except Exception as exc:  # reported per cell, the sweep carries on
                failures.append(f"{entry.key} {pname} {mode_name}: {type(exc).__name__}: {exc}")
                continue
            cells.append(SweepCell(
                entry.network, entry.layer, pname, mode_name, codec,
                sum(r.payload_bytes for r in reports), sum(r.metadata_bytes for r in reports),
                sum(r.baseline_bytes for r in reports), optimal,
            ))
    return cells, failures


def summarize(layer_rows: Sequence[dict], platforms, modes, codec) -> list[list]:
    """Summary rows from parsed ``layers.csv`` rows.

    Geometric means are taken over the 6-decimal savings as written, so the
    summary can be recomputed from ``layers.csv`` alone.
    """
    out = []
    for pname in platforms:
        for mode_name in modes:
            group = [r for r in layer_rows if r["platform"] == pname and r["mode"] == mode_name]
            for overhead, column in (("without", "saving_no_overhead"), ("with", "saving_with_overhead")):
                if group:
                    saving = _ratio(geometric_mean_saving([float(r[column]) for r in group]))
                else:
                    saving = ""
                out.append([pname, mode_name, codec, overhead, len(group), saving])
    return out


def markdown_table(summary: Sequence[list], platforms, modes, args) -> str:
    by_key = {(r[0], r[1], r[3]): r[5] for r in summary}
    header = ["Mode"]
    for p in platforms:
        header += [f"{p} w/o overhead", f"{p} w/ overhead"]
    lines = [
        "# Bandwidth saved (%), geometric mean over layers",
        "",
        f"Synthetic {args.pattern} activations, zero fraction {args.sparsity}, "
        f"{args.seeds} seed(s) from base seed {args.seed}, codec {args.codec}.",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    skipped = False
    for m in modes:
        cells = [m]
        for p in platforms:
            for overhead in ("without", "with"):
                value = by_key.get((p, m, overhead), "")
                if value == "":
                    cells.append("n/a*")
                    skipped = True
                else:
                    cells.append(f"{100 * float(value):.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    if skipped:
        lines += ["", "\\* not applicable: a fetched tile is smaller than one subtensor period."]
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    try:
        catalog = layer_catalog(args.catalog)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read catalog: {exc}") from None
    if not catalog:
        raise InputError("catalog is empty")
    platforms = tuple(p.name for p in _platforms(args.platform))
    modes = _modes(args.mode)
    model_args = (args.pattern, args.sparsity, args.seed, args.blob_radius)
    tasks = [(e, platforms, modes, args.codec, model_args, args.seeds, args.baseline_exact)
             for e in catalog]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_entry, tasks))
    else:
        results = [_sweep_entry(t) for t in tasks]

    cells = [c for cs, _ in results for c in cs]
    failures = [f for _, fs in results for f in fs]
    order = {(e.network, e.layer): i for i, e in enumerate(catalog)}
    cells.sort(key=lambda c: (platforms.index(c.platform), modes.index(c.mode),
                              order[(c.network, c.layer)]))

    args.out.mkdir(parents=True, exist_ok=True)
    rows = [report_row(c.as_report()) for c in cells]
    _write_csv(args.out / "layers.csv", REPORT_COLUMNS, rows)

    parsed = list(csv.DictReader(io.StringIO(_csv_text(REPORT_COLUMNS, rows))))
    summary = summarize(parsed, platforms, modes, args.codec)
    _write_csv(args.out / "summary.csv", SUMMARY_COLUMNS, summary)
    (args.out / "table.md").write_text(markdown_table(summary, platforms, modes, args))

    print(f"{len(cells)} cells over {len(catalog)} layers written to {args.out}")
    for f in failures:
        _error(f"cell failed: {f}")
    return EXIT_CONFIG if failures else EXIT_OK


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "simulate":
            return cmd_simulate(args, parser)
        return cmd_sweep(args)
    except (InputError, FeatureMapFormatError) as exc:
        _error(str(exc))
        return EXIT_INPUT
    except ConfigurationError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _error(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
