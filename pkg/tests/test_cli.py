import csv
import os

import numpy as np
import pytest

from viinit import cli
from viinit.euroc_io import GT_PATH, IMU_PATH, load_dataset
from viinit.kvfile import read_kv

NOISE_FREE_SPEC = """\
# noise-free sinusoid, biases injected
imu_noise_scale = 0.0
pixel_noise_sigma = 0.0
gyro_bias = 0.02 -0.01 0.03
accel_bias = 0.1 0.0 -0.05
"""


def _file(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return str(path)


def _tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            if f == "manifest.txt":
                continue
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def noise_free_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    spec = _file(d / "spec.txt", NOISE_FREE_SPEC)
    out = str(d / "data")
    assert cli.main(["simulate", "--config", spec, "--seed", "3", "--out", out]) == 0
    weak = _file(d / "weak_prior.txt", "prior_weight = 1e-6\n")
    return d, out, weak


def test_simulate_is_byte_identical(tmp_path):
    spec = _file(tmp_path / "spec.txt", "duration = 1.0\n")
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", spec, "--seed", "9", "--out", str(tmp_path / name)]) == 0
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a and a == b
    m = read_kv(str(tmp_path / "a" / "manifest.txt"))
    assert m["command"] == "simulate" and m["seed"] == 9


def test_simulate_stationary_has_zero_velocity(tmp_path):
    spec = _file(tmp_path / "spec.txt", "kind = stationary-rotation\nduration = 1.0\n")
    out = str(tmp_path / "data")
    assert cli.main(["simulate", "--config", spec, "--out", out]) == 0
    rows = [r for r in csv.reader(open(os.path.join(out, GT_PATH))) if not r[0].startswith("#")]
    vel = np.array([[float(x) for x in r[8:11]] for r in rows])
    assert np.all(vel == 0.0)


def test_simulated_dataset_loads_back(noise_free_dir):
    _, out, _ = noise_free_dir
    bundle = load_dataset(out)
    assert len(bundle.keyframe_ids) == 21 and bundle.tracks


def test_simulate_bad_spec(tmp_path):
    spec = _file(tmp_path / "spec.txt", "kind = spiral\n")
    assert cli.main(["simulate", "--config", spec, "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    spec = _file(tmp_path / "spec2.txt", "wobble = 3\n")
    assert cli.main(["simulate", "--config", spec, "--out", str(tmp_path / "y")]) == cli.EXIT_CONFIG


def test_init_noise_free(noise_free_dir, tmp_path):
    _, data, weak = noise_free_dir
    out = str(tmp_path / "init")
    assert cli.main(["init", data, "--config", weak, "--out", out]) == 0
    metrics = read_kv(os.path.join(out, "metrics.txt"))
    assert metrics["ate_m"] < 1e-6
    assert metrics["gyro_bias_error"] < 1e-4 and metrics["accel_bias_error"] < 1e-3
    for name in ("result.txt", "states.csv", "reports.csv", "trajectory.svg", "manifest.txt"):
        assert os.path.exists(os.path.join(out, name)), name
    steps = [r["step"] for r in _rows(os.path.join(out, "reports.csv"))]
    assert steps == ["step1", "step2", "step3", "step4"]
    manifest = read_kv(os.path.join(out, "manifest.txt"))
    assert manifest["config.prior_weight"] == 1e-6
    assert any(k.startswith("input.") for k in manifest)


def test_init_flags_run_the_baseline(noise_free_dir, tmp_path):
    _, data, _ = noise_free_dir
    out = str(tmp_path / "base")
    assert cli.main(["init", data, "--disable-step3", "--disable-step4", "--ate-mode", "raw", "--out", out]) == 0
    steps = [r["step"] for r in _rows(os.path.join(out, "reports.csv"))]
    assert steps == ["step1", "step2"]
    assert read_kv(os.path.join(out, "metrics.txt"))["ate_mode"] == "raw"


def test_init_missing_imu(noise_free_dir, tmp_path):
    import shutil

    _, data, _ = noise_free_dir
    broken = str(tmp_path / "broken")
    shutil.copytree(data, broken)
    os.remove(os.path.join(broken, IMU_PATH))
    assert cli.main(["init", broken, "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_init_unknown_config_key(noise_free_dir, tmp_path):
    _, data, _ = noise_free_dir
    bad = _file(tmp_path / "bad.txt", "window_lenght = 2.0\n")
    assert cli.main(["init", data, "--config", bad, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_init_partial_result_exit_code(noise_free_dir, tmp_path):
    import shutil

    _, data, _ = noise_free_dir
    gap = str(tmp_path / "gap")
    shutil.copytree(data, gap)
    path = os.path.join(gap, IMU_PATH)
    lines = open(path).read().splitlines()
    keep = [ln for ln in lines if ln.startswith("#") or not 0.5e9 < int(ln.split(",")[0]) < 0.6e9]
    _file(path, "\n".join(keep) + "\n")
    out = str(tmp_path / "o")
    assert cli.main(["init", gap, "--out", out]) == cli.EXIT_PARTIAL
    res = read_kv(os.path.join(out, "result.txt"))
    assert res["status"] == "partial" and res["failed_stage"] == "step2"


@pytest.mark.parametrize("exc,code", [
    (cli.ConfigError("x"), 2),
    (cli.DataError("x"), 3),
    (cli.NumericalFailure("x"), 4),
])
def test_exit_code_mapping(exc, code):
    assert cli.exit_code_for(exc) == code


def test_evaluate_rows_and_rerun(tmp_path):
    spec = _file(tmp_path / "spec.txt", "duration = 7.0\n")
    data = str(tmp_path / "data")
    assert cli.main(["simulate", "--config", spec, "--out", data]) == 0
    outs = []
    for name in ("e1", "e2"):
        out = str(tmp_path / name)
        assert cli.main(["evaluate", data, "--interval", "2.5", "--out", out]) == 0
        outs.append(out)
    rows = _rows(os.path.join(outs[0], "segments.csv"))
    assert len(rows) == 3 and all(r["status"] == "ok" for r in rows)
    for name in ("segments.csv", "summary.txt", "segments.svg"):
        with open(os.path.join(outs[0], name), "rb") as a, open(os.path.join(outs[1], name), "rb") as b:
            assert a.read() == b.read(), name


def test_evaluate_marks_failed_segments(tmp_path):
    spec = _file(tmp_path / "spec.txt", "duration = 4.5\n")
    data = str(tmp_path / "data")
    assert cli.main(["simulate", "--config", spec, "--out", data]) == 0
    # drop every observation in the second window
    path = os.path.join(data, "tracks.txt")
    kept, current = [], []
    for ln in open(path).read().splitlines():
        if ln.startswith("L"):
            kept.extend(current if sum(1 for c in current if c.startswith("O")) >= 2 else [])
            current = [ln]
        elif not 2.4e9 < int(ln.split()[1]) < 4.6e9:
            current.append(ln)
    kept.extend(current if sum(1 for c in current if c.startswith("O")) >= 2 else [])
    _file(path, "\n".join(kept) + "\n")
    out = str(tmp_path / "ev")
    assert cli.main(["evaluate", data, "--out", out]) == cli.EXIT_PARTIAL
    rows = _rows(os.path.join(out, "segments.csv"))
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert rows[1]["failed_stage"] == "step1"


def test_compare_noise_free_tie(noise_free_dir, tmp_path):
    _, data, weak = noise_free_dir
    out = str(tmp_path / "cmp")
    assert cli.main(["compare", data, "--config", weak, "--seeds", "1", "--sequence", "nf", "--out", out]) == 0
    rows = _rows(os.path.join(out, "compare_seeds.csv"))
    assert len(rows) == 1 and rows[0]["outcome"] == "tie"
    summary = _rows(os.path.join(out, "compare_ate.csv"))
    assert len(summary) == 1
    metric_cols = [c for c in summary[0] if c.endswith("_viba")]
    assert metric_cols == ["6dof_without_viba", "decoupled_without_viba", "6dof_with_viba", "decoupled_with_viba"]
    assert os.path.exists(os.path.join(out, "compare.svg"))


def test_compare_from_spec_recount(tmp_path):
    spec = _file(tmp_path / "spec.txt", "duration = 2.0\n")
    cfg = _file(tmp_path / "init.txt", "step1_rotation_noise_deg = 0.5\n")
    out = str(tmp_path / "cmp")
    assert cli.main(["compare", "--spec", spec, "--config", cfg, "--seeds", "3", "--out", out]) == 0
    rows = _rows(os.path.join(out, "compare_seeds.csv"))
    summary = _rows(os.path.join(out, "compare_ate.csv"))[0]
    wins = sum(r["outcome"] == "win" for r in rows)
    assert float(summary["win_rate"]) == pytest.approx(wins / len(rows))
    assert summary["sequence"] == "spec"


def test_compare_needs_one_source(tmp_path):
    assert cli.main(["compare", "--out", str(tmp_path / "c")]) == cli.EXIT_CONFIG


def test_convert_calib(tmp_path):
    import yaml

    T = np.eye(4)
    for name, x in (("cam0.yaml", 0.0), ("cam1.yaml", 0.11)):
        T[0, 3] = x
        _file(tmp_path / name, yaml.safe_dump({"T_BS": {"data": T.ravel().tolist()},
                                               "intrinsics": [458.0, 457.0, 367.0, 248.0], "resolution": [752, 480]}))
    _file(tmp_path / "imu.yaml", yaml.safe_dump({
        "gyroscope_noise_density": 1.7e-4, "gyroscope_random_walk": 2e-5,
        "accelerometer_noise_density": 2e-3, "accelerometer_random_walk": 3e-3}))
    out = str(tmp_path / "calibration.txt")
    args = ["convert-calib", str(tmp_path / "cam0.yaml"), str(tmp_path / "cam1.yaml"), str(tmp_path / "imu.yaml")]
    assert cli.main(args + ["--out", out]) == 0
    kv = read_kv(out)
    assert kv["baseline"] == pytest.approx(0.11) and kv["fx"] == 458.0
