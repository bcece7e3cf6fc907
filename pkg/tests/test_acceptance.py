"""Acceptance gate: one printed PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
inline; they are also printed with capture disabled under a plain run.
"""
import csv
import random
import time

import numpy as np
import pytest

from gratetile.cli import main
from gratetile.codec import decode, encode
from gratetile.core import LARGE, SMALL, SparsityModel, generate_feature_map
from gratetile.division import (
    MODE_NAMES,
    DivisionMode,
    GrateConfig,
    Window,
    build_grid,
    grate_config,
    reduce_config,
    resolve_mode,
    subtensors_in_window,
)
from gratetile.layout import POINTER_BITS, SIZE_FIELD_BITS, metadata_bits_per_kb, metadata_percentage, size_field_widths
from gratetile.simulator import brute_force_oracle, layer_for, simulate_layer
from helpers import containment_violations

UNIFORM = ("u8", "u4", "u2", "u1")


@pytest.fixture
def verdict(capsys):
    def report(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"
    return report


# --------------------------------------------------------------------------
# 1. configuration exactness
# --------------------------------------------------------------------------


def _configs():
    return [
        grate_config(1, 1, 1, 8),
        reduce_config(grate_config(1, 2, 1, 8), 8),
        grate_config(2, 1, 1, 8),
        grate_config(5, 4, 1, 8),
        reduce_config(grate_config(5, 4, 1, 8), 8),
    ]


def test_criterion_1_configuration_exactness(verdict):
    expected = [(8, {1, 7}), (8, {0, 7}), (8, {2, 6}), (32, {27, 2}), (8, {3, 2})]
    got = [(c.period, set(c.cuts)) for c in _configs()]
    elapsed = min(_timed(_configs) for _ in range(20))
    ok = got == expected and elapsed < 1e-3
    verdict("criterion 1 (configuration exactness)", ok,
            f"{got} in {elapsed * 1e3:.3f} ms")


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# --------------------------------------------------------------------------
# 2. metadata arithmetic
# --------------------------------------------------------------------------

TABLE_BITS = {"grate4": 192, "grate8": 48, "grate16": 12, "u8": 28, "u4": 112, "u2": 448, "u1": 2048}
TABLE_PERCENT = {"grate4": 2.36, "grate8": 0.59, "grate16": 0.15, "u8": 0.34, "u4": 1.37,
                 "u2": 5.47, "u1": 25.0}


def test_criterion_2_metadata_bits(verdict):
    bits = {m: metadata_bits_per_kb(m) for m in TABLE_BITS}
    w17 = size_field_widths(GrateConfig(8, (1, 7)))
    w20 = size_field_widths(GrateConfig(8, (2, 6)))
    # first principles: pointer + sizes per 8x8x8 super-block, scaled to 512 words
    derived = {f"grate{n}": (POINTER_BITS + SIZE_FIELD_BITS) * 512 // (n * n * 8) for n in (4, 8, 16)}
    derived.update({f"u{n}": POINTER_BITS * 512 // (n * n * 8) for n in (8, 4, 2)})
    derived["u1"] = 32 * 512 // 8
    ok = (bits == TABLE_BITS == derived and w17 == (3, 4, 4, 6) and sum(w17) == 17
          and w20 == (5, 5, 5, 5) and sum(w20) == 20)
    verdict("criterion 2 (metadata bits/KB and size-field widths)", ok,
            f"bits={bits} widths={w17}/{w20}")


@pytest.mark.xfail(strict=True, reason="the grate4 reference percentage 2.36 disagrees with "
                   "its own 192 bits/KB (192/8192 = 2.34%); see the decisions ledger")
def test_criterion_2_metadata_percentages(verdict):
    pct = {m: metadata_percentage(m) for m in TABLE_PERCENT}
    off = {m: round(pct[m], 4) for m in pct if abs(pct[m] - TABLE_PERCENT[m]) > 0.01}
    verdict("criterion 2 (metadata percentages within 0.01)", not off,
            f"outside tolerance: {off}" if off else "all seven rows")


# --------------------------------------------------------------------------
# 3. window containment
# --------------------------------------------------------------------------


def test_criterion_3_window_containment(verdict):
    rng = random.Random(2024)
    t0 = time.perf_counter()
    cases = bad = windows = 0
    while cases < 1000:
        k, s, d = rng.randint(0, 5), rng.randint(1, 4), rng.randint(1, 4)
        t_w = rng.choice([4, 8, 16])
        t_h = t_w * rng.randint(1, 2)
        n = s * t_w
        # half the cases use the full period, half a random divisor of it
        divisor = n if rng.random() < 0.5 else rng.choice([m for m in range(1, n + 1) if n % m == 0])
        b, c = containment_violations(k, s, d, t_w, t_h, reduce_to=divisor)
        cases += 1
        bad += b
        windows += c

    grid = build_grid((32, 32, 8), DivisionMode.grate(GrateConfig(8, (1, 7))))
    found = subtensors_in_window(grid, Window(7, 17, 7, 17, 0, 1))
    shapes = sorted((grid.box(r)[1] - grid.box(r)[0], grid.box(r)[3] - grid.box(r)[2]) for r, _ in found)
    canonical = shapes == sorted([(6, 6), (2, 6), (2, 6), (6, 2), (6, 2)] + [(2, 2)] * 4)
    canonical &= {c for _, c in found} == {"full"}
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and windows > 0 and canonical and elapsed < 10
    verdict("criterion 3 (window containment)", ok,
            f"{cases} configs, {windows} interior windows, {bad} violations, "
            f"canonical 10x10={'ok' if canonical else 'WRONG'}, {elapsed:.2f} s")


# --------------------------------------------------------------------------
# 4. oracle equivalence
# --------------------------------------------------------------------------


def test_criterion_4_oracle_equivalence(verdict):
    rng = random.Random(7)
    t0 = time.perf_counter()
    instances = mismatches = 0
    covered = set()
    for _ in range(3):
        for mode_name in MODE_NAMES:
            for codec in ("bitmask", "zrlc", "raw"):
                for zf in (0.0, 0.3, 0.7, 1.0):
                    c = rng.choice([8, 16])
                    dims = (rng.randint(1, 32), rng.randint(1, 32), c)
                    platform = LARGE if mode_name == "grate16" else rng.choice([SMALL, LARGE])
                    layer = layer_for(rng.randint(0, 2), rng.randint(1, 2), rng.randint(1, 2), c, platform)
                    mode = resolve_mode(mode_name, layer)
                    if mode is None:  # grate16 needs a 16-divisible tile step
                        layer = layer_for(rng.randint(0, 2), 1, rng.randint(1, 2), c, platform)
                        mode = resolve_mode(mode_name, layer)
                    fm = generate_feature_map(dims, SparsityModel(zero_fraction=zf, seed=rng.getrandbits(32)))
                    exact = rng.random() < 0.25
                    fast = simulate_layer(fm, layer, platform, mode, codec, baseline_exact=exact)
                    slow = brute_force_oracle(fm, layer, platform, mode, codec, baseline_exact=exact)
                    instances += 1
                    mismatches += fast != slow
                    covered.add((mode_name, codec, zf))
    elapsed = time.perf_counter() - t0
    ok = instances >= 200 and mismatches == 0 and len(covered) == 7 * 3 * 4 and elapsed < 60
    verdict("criterion 4 (oracle equivalence)", ok,
            f"{instances} instances over {len(covered)} mode/codec/sparsity cells, "
            f"{mismatches} mismatches, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# 5. codec roundtrip
# --------------------------------------------------------------------------


CODEC_SEEDS = {"bitmask": 1, "zrlc": 2, "raw": 3}


@pytest.mark.parametrize("codec", list(CODEC_SEEDS))
def test_criterion_5_codec_roundtrip(codec, verdict):
    rng = np.random.default_rng(CODEC_SEEDS[codec])
    failures = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 1025))
        words = rng.integers(1, 1 << 16, n).astype(np.uint16)
        words[rng.random(n) < rng.random()] = 0
        block = encode(codec, words)
        out = decode(block)
        failures += not (out.dtype == np.uint16 and np.array_equal(out, words))
    verdict(f"criterion 5 (codec roundtrip, {codec})", failures == 0,
            f"10000 vectors, {failures} failures")


# --------------------------------------------------------------------------
# 6-7. default sweep: trends and determinism
# --------------------------------------------------------------------------

SWEEP_ARGS = ["sweep", "--platform", "both", "--sparsity", "0.7", "--seeds", "3",
              "--codec", "bitmask", "--pattern", "iid"]


@pytest.fixture(scope="module")
def default_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "run1"
    t0 = time.perf_counter()
    code = main([*SWEEP_ARGS, "--out", str(out)])
    return out, code, time.perf_counter() - t0


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_6_trends(default_sweep, verdict):
    out, code, elapsed = default_sweep
    summary = {(r["platform"], r["mode"], r["overhead"]): r["saving"] for r in _read(out / "summary.csv")}
    layers = _read(out / "layers.csv")

    def s(p, m, o):
        return 100 * float(summary[(p, m, o)])

    lines = []
    for p in ("small", "large"):
        a = all(s(p, "grate8", "with") > s(p, u, "with") for u in UNIFORM)
        without = {m: s(p, m, "without") for m in MODE_NAMES if summary[(p, m, "without")] != ""}
        b = max(without, key=without.get) == "u1" and without["u1"] - without["grate8"] <= 5
        c = s(p, "u1", "without") - s(p, "u1", "with") >= 15
        lines.append((p, a, b, c, without["u1"] - without["grate8"],
                      s(p, "u1", "without") - s(p, "u1", "with")))
    worst = max(
        max(float(r["saving_no_overhead"]), float(r["saving_with_overhead"])) - float(r["optimal"])
        for r in layers
    )
    d = worst <= 0.02
    ok = code == 0 and all(a and b and c for _, a, b, c, _, _ in lines) and d and elapsed < 300
    detail = "; ".join(
        f"{p}: a={'ok' if a else 'NO'} b={'ok' if b else 'NO'} (gap {gap:.1f} pts) "
        f"c={'ok' if c else 'NO'} (drop {drop:.1f} pts)" for p, a, b, c, gap, drop in lines
    ) + f"; d={'ok' if d else 'NO'} (max excess {100 * worst:.1f} pts); {elapsed:.0f} s"
    verdict("criterion 6 (trend reproduction)", ok, detail)


def test_criterion_7_determinism(default_sweep, tmp_path, verdict):
    first, _, _ = default_sweep
    second = tmp_path / "run2"
    main([*SWEEP_ARGS, "--out", str(second)])
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("layers.csv", "summary.csv", "table.md")}
    verdict("criterion 7 (determinism)", all(same.values()),
            ", ".join(f"{n} {'identical' if v else 'DIFFERS'}" for n, v in same.items()))
