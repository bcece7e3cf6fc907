import csv
import math
import subprocess
import sys

import pytest

from gratetile.cli import layer_seed, main
from gratetile.core import load_feature_map, zero_fraction

SMALL_CATALOG = """# test catalog
tiny,a,20,24,16,3,1
tiny,b,20,20,8,5,1
tiny,c,24,24,8,3,2
"""


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_then_simulate(tmp_path, capsys):
    out = tmp_path / "fm.grtt"
    assert main(["gen", "--dims", "64x64x8", "--sparsity", "0.7", "--seed", "42", "--out", str(out)]) == 0
    assert load_feature_map(out).dims == (64, 64, 8)
    csv_path = tmp_path / "r.csv"
    assert main(["simulate", "--map", str(out), "--kernel", "3", "--mode", "grate8",
                 "--platform", "small", "--csv", str(csv_path)]) == 0
    [row] = rows(csv_path)
    assert row["mode"] == "grate8" and row["platform"] == "small"
    assert float(row["saving_with_overhead"]) <= float(row["saving_no_overhead"])
    assert list(row) == ["network", "layer", "platform", "mode", "codec", "payload_bytes",
                         "metadata_bytes", "baseline_bytes", "saving_no_overhead",
                         "saving_with_overhead", "optimal"]


@pytest.mark.parametrize("argv, flag", [
    (["gen", "--dims", "8x8x8", "--sparsity", "1.3", "--out", "x"], "--sparsity"),
    (["gen", "--dims", "8x8", "--out", "x"], "--dims"),
    (["gen", "--dims", "8x8x8", "--seed", "-1", "--out", "x"], "--seed"),
    (["simulate", "--synthetic", "--dims", "8x8x8", "--kernel", "4"], "--kernel"),
    (["simulate", "--synthetic", "--dims", "8x8x8", "--kernel", "3", "--mode", "u3"], "--mode"),
])
def test_argument_errors_exit_2(argv, flag, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2
    assert flag in capsys.readouterr().err


def test_simulate_needs_a_layer(capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--synthetic", "--dims", "8x8x8"])
    assert info.value.code == 2


def test_gen_blob_fraction(tmp_path):
    out = tmp_path / "b.grtt"
    assert main(["gen", "--dims", "64x64x8", "--mode", "blob", "--blob-radius", "3",
                 "--sparsity", "0.6", "--seed", "7", "--out", str(out)]) == 0
    assert abs(zero_fraction(load_feature_map(out)) - 0.6) <= 0.02


def test_simulate_all_modes(tmp_path, capsys):
    csv_path = tmp_path / "all.csv"
    assert main(["simulate", "--synthetic", "--dims", "32x32x16", "--kernel", "3",
                 "--mode", "all", "--platform", "both", "--csv", str(csv_path)]) == 0
    got = rows(csv_path)
    large = [r["mode"] for r in got if r["platform"] == "large"]
    small = [r["mode"] for r in got if r["platform"] == "small"]
    assert large == ["grate4", "grate8", "grate16", "u8", "u4", "u2", "u1"]
    assert small == ["grate4", "grate8", "u8", "u4", "u2", "u1"]
    assert "grate16 skipped on small" in capsys.readouterr().err
    for r in got:
        assert float(r["saving_with_overhead"]) <= float(r["saving_no_overhead"])
        assert len(r["saving_no_overhead"].split(".")[1]) == 6


def test_simulate_raw_uniform_dense_is_zero(tmp_path, capsys):
    assert main(["simulate", "--synthetic", "--dims", "32x32x8", "--sparsity", "0", "--kernel", "1",
                 "--mode", "u8", "--codec", "raw", "--platform", "small"]) == 0
    out = capsys.readouterr().out.splitlines()
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert float(row["saving_no_overhead"]) == 0


def test_simulate_catalog_layer(capsys):
    assert main(["simulate", "--synthetic", "--layer", "resnet50/res3a_b", "--mode", "grate8",
                 "--platform", "small"]) == 0
    assert "resnet50,res3a_b,small,grate8" in capsys.readouterr().out


def test_simulate_dims_mismatch_exits_3(tmp_path, capsys):
    out = tmp_path / "fm.grtt"
    main(["gen", "--dims", "16x16x8", "--out", str(out)])
    assert main(["simulate", "--map", str(out), "--layer", "vgg16/conv1_2"]) == 3
    assert "expects 224x224x64" in capsys.readouterr().err


def test_simulate_bad_file_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.grtt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["simulate", "--map", str(bad), "--kernel", "3"]) == 3
    assert "offset 0" in capsys.readouterr().err
    assert main(["simulate", "--map", str(tmp_path / "missing"), "--kernel", "3"]) == 3


def test_simulate_config_error_exits_4(capsys):
    assert main(["simulate", "--synthetic", "--dims", "16x16x8", "--kernel", "41"]) == 4
    assert main(["simulate", "--synthetic", "--dims", "16x16x12", "--kernel", "3"]) == 4


def _sweep(tmp_path, name, *extra):
    cat = tmp_path / "cat.csv"
    cat.write_text(SMALL_CATALOG)
    out = tmp_path / name
    code = main(["sweep", "--catalog", str(cat), "--seeds", "2", "--out", str(out), *extra])
    return code, out


def test_sweep_outputs(tmp_path, capsys):
    code, out = _sweep(tmp_path, "s")
    assert code == 0
    layers = rows(out / "layers.csv")
    summary = rows(out / "summary.csv")
    assert len(summary) == 2 * 7 * 2
    assert {(r["platform"], r["mode"], r["overhead"]) for r in summary} == {
        (p, m, o) for p in ("small", "large")
        for m in ("grate4", "grate8", "grate16", "u8", "u4", "u2", "u1") for o in ("with", "without")}
    for r in summary:
        group = [x for x in layers if (x["platform"], x["mode"]) == (r["platform"], r["mode"])]
        assert int(r["layers"]) == len(group)
        if not group:
            assert r["saving"] == ""
            continue
        column = "saving_with_overhead" if r["overhead"] == "with" else "saving_no_overhead"
        remaining = [1 - float(x[column]) for x in group]
        geo = 1 - math.exp(sum(map(math.log, remaining)) / len(remaining))
        assert abs(round(geo, 6) - float(r["saving"])) <= 1e-9
    for r in layers:
        saving = 1 - int(r["payload_bytes"]) / int(r["baseline_bytes"])
        assert float(r["saving_no_overhead"]) == pytest.approx(saving, abs=5e-7)
    table = (out / "table.md").read_text()
    assert "| grate8 |" in table and "n/a*" in table


def test_sweep_is_deterministic_and_parallel_safe(tmp_path, capsys):
    _, a = _sweep(tmp_path, "a")
    _, b = _sweep(tmp_path, "b", "--jobs", "2")
    for name in ("layers.csv", "summary.csv", "table.md"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_sweep_reports_failed_cells(tmp_path, capsys):
    cat = tmp_path / "cat.csv"
    cat.write_text(SMALL_CATALOG + "huge,k,40,40,8,83,1\n")
    out = tmp_path / "f"
    assert main(["sweep", "--catalog", str(cat), "--seeds", "1", "--out", str(out)]) == 4
    assert "huge/k" in capsys.readouterr().err
    assert {r["network"] for r in rows(out / "layers.csv")} == {"tiny"}


def test_sweep_bad_catalog_exits_3(tmp_path, capsys):
    cat = tmp_path / "cat.csv"
    cat.write_text("a,b,1\n")
    assert main(["sweep", "--catalog", str(cat), "--out", str(tmp_path / "o")]) == 3


def test_layer_seed_is_stable():
    assert layer_seed(0, "vgg16/conv1_2", 0) == layer_seed(0, "vgg16/conv1_2", 0)
    assert layer_seed(0, "vgg16/conv1_2", 0) != layer_seed(0, "vgg16/conv1_2", 1)
    assert layer_seed(0, "a/b", 0) == 2228113129  # CRC-32 of b"0:a/b:0"


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.grtt"
    proc = subprocess.run([sys.executable, "-m", "gratetile", "gen", "--dims", "4x4x8", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and out.exists()
