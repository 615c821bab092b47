import os
import subprocess
import sys

import numpy as np
import pytest

from octwarp.cli import bench, main, parse_size
from octwarp.io import read_octd, read_octv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_kv(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> correct on the default scene, through the command line."""
    root = tmp_path_factory.mktemp("cli")
    sim, out = root / "sim", root / "out"
    assert main(["--threads", "1", "simulate", "--out", str(sim), "--seed", "7"]) == 0
    assert main(["--threads", "1", "correct", str(sim / "vol0_X.octv"), str(sim / "vol1_Y.octv"),
                 "--out", str(out)]) == 0
    return sim, out


def test_parse_size():
    assert parse_size("64x32x128") == (64, 32, 128)
    for bad in ("64x32", "axbxc", "0x8x8"):
        with pytest.raises(Exception):
            parse_size(bad)


def test_bench_small_counts_and_speed(capsys):
    code, out, err = run(capsys, "bench", "--size", 16, "--repeats", 1)
    assert code == 0
    kv = parse_kv(out)
    assert int(kv["separable_count"]) == int(kv["separable_formula"]) == 16 ** 2 * 20
    assert int(kv["naive_count"]) == int(kv["naive_formula"]) == 16 ** 3 * 64
    assert float(kv["separable_seconds"]) + float(kv["naive_seconds"]) < 1.0


def test_bench_n64_count_ratio():
    res = bench(64, "both", 1)
    assert (res["naive_count"], res["separable_count"]) == (16_777_216, 81_920)
    assert res["count_ratio"] == pytest.approx(204.8)


def test_bench_rejects_small_size(capsys):
    code, out, err = run(capsys, "bench", "--size", 8)
    assert code == 2 and out == "" and "size" in err


def test_simulate_outputs(pipeline):
    sim, _ = pipeline
    names = sorted(p.name for p in sim.iterdir())
    assert names == ["trace.csv", "truth0_X.octd", "truth1_Y.octd", "vol0_X.octv", "vol1_Y.octv"]
    v = read_octv(sim / "vol1_Y.octv")
    assert v.fast_axis == "Y" and v.voxels.shape == (64, 1, 64, 128)


def test_correct_outputs(pipeline):
    _, out = pipeline
    for name in ("vol0_X.disp.octd", "vol1_Y.disp.octd", "merged.octv", "enface_before.png",
                 "enface_after.png", "enface_merged.png", "correct.log"):
        assert (out / name).stat().st_size > 0
    log = (out / "correct.log").read_text()
    assert "runtime_total_excl_io_s" in log and "input_io_s" in log and "non_overlap = 0" in log


def test_evaluate_truth_vs_estimate(pipeline, capsys):
    sim, out = pipeline
    res = {}
    for mode in ("rigid", "affine"):
        code, text, err = run(capsys, "evaluate", "--fieldA", out / "vol0_X.disp.octd",
                              "--fieldB", sim / "truth0_X.octd", "--mode", mode, "--fast-axis", "X")
        assert code == 0
        res[mode] = parse_kv(text)
    assert float(res["affine"]["median_3d"]) < 0.5
    assert float(res["affine"]["residual"]) <= float(res["rigid"]["residual"])


def test_evaluate_identical_fields(pipeline, capsys, tmp_path):
    _, out = pipeline
    f = out / "vol1_Y.disp.octd"
    code, text, _ = run(capsys, "evaluate", "--fieldA", f, "--fieldB", f, "--fast-axis", "Y",
                        "--out", tmp_path / "m.txt")
    kv = parse_kv(text)
    assert code == 0
    assert all(float(v) == pytest.approx(0.0, abs=1e-9) for k, v in kv.items()
               if k.startswith(("median", "frac")))
    assert (tmp_path / "m.txt").read_text() == text


def test_evaluate_dimension_mismatch(pipeline, capsys, tmp_path):
    _, out = pipeline
    main(["simulate", "--out", str(tmp_path), "--size", "16x16x32"])
    capsys.readouterr()
    code, text, err = run(capsys, "evaluate", "--fieldA", out / "vol0_X.disp.octd",
                          "--fieldB", tmp_path / "truth0_X.octd")
    assert code != 0 and text == ""


def test_render_deterministic(pipeline, tmp_path, capsys):
    sim, _ = pipeline
    assert main(["render", str(sim / "vol0_X.octv"), "--out", str(tmp_path / "a.png")]) == 0
    assert main(["render", str(sim / "vol0_X.octv"), "--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    from PIL import Image
    img = Image.open(tmp_path / "a.png")
    assert img.mode == "L" and img.size == (64, 64)
    assert Image.open(pipeline[1] / "enface_after.png").mode == "RGB"


def test_correct_errors(tmp_path, capsys):
    main(["simulate", "--out", str(tmp_path), "--size", "16x16x32"])
    capsys.readouterr()
    code, out, err = run(capsys, "correct", tmp_path / "vol0_X.octv", "--out", tmp_path / "o")
    assert code == 2 and out == ""
    code, out, err = run(capsys, "correct", tmp_path / "missing.octv", tmp_path / "vol1_Y.octv",
                         "--out", tmp_path / "o")
    assert code == 2 and "missing" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[optimizer]\nmomentum = 2\n")
    code, out, err = run(capsys, "correct", tmp_path / "vol0_X.octv", tmp_path / "vol1_Y.octv",
                         "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and "momentum" in err


def test_logs_go_to_stderr(tmp_path):
    env = dict(os.environ, OCTWARP_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "octwarp.cli", "simulate", "--out", str(tmp_path),
                           "--size", "16x16x32"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout == "" and "wrote 2 volumes" in proc.stderr


def test_trace_csv(pipeline):
    sim, _ = pipeline
    data = np.loadtxt(sim / "trace.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 5 and np.all(np.diff(data[:, 0]) > 0)
    truth = read_octd(sim / "truth0_X.octd", "X")
    assert truth.dims == (64, 64, 1, 128)
