"""Command-line entry point: ``viinit {simulate,init,evaluate,compare,convert-calib}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 partial or degraded result.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from viinit import __version__
from viinit.errors import ConfigError, DataError, NumericalFailure, StageError, ViInitError
from viinit.euroc_io import format_calibration, calibration_from_euroc_yaml, load_dataset, write_dataset, ns_to_s
from viinit.evaluation import (
    aggregate,
    compare_strategies,
    evaluate_result,
    exhaustive_protocol,
    segments_csv,
    seeds_csv,
    summary_csv,
)
from viinit.geometry import matrix_to_quat_wxyz
from viinit.kvfile import atomic_write_text, format_kv, read_kv
from viinit.pipeline import InitConfig, ground_truth_states, init_config_from_kv, init_config_to_kv, run_initialization
from viinit.simulator import config_from_kv, simulate

log = logging.getLogger("viinit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4, 5


# --------------------------------------------------------------------------- manifest


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(path):
    if path is None:
        return []
    if os.path.isfile(path):
        return [path]
    out = []
    for root, dirs, files in os.walk(path):
        dirs.sort()
        out += [os.path.join(root, f) for f in sorted(files) if not f.startswith(".") and f != "manifest.txt"]
    return out


def write_manifest(out_dir, command, config: dict, inputs, seed, timings: dict, outputs, extra=None):
    """Key-value record of everything needed to rerun ``command``; written last, atomically."""
    items = {"command": command, "tool_version": __version__, "seed": seed}
    for i, p in enumerate(f for src in inputs for f in _input_files(src)):
        items[f"input.{i}.path"] = os.path.abspath(p)
        items[f"input.{i}.sha256"] = file_sha256(p)
    for k, v in config.items():
        items[f"config.{k}"] = v
    for k, v in timings.items():
        items[f"timing.{k}"] = float(v)
    for i, p in enumerate(outputs):
        items[f"output.{i}"] = os.path.abspath(p)
    items.update(extra or {})
    path = os.path.join(out_dir, "manifest.txt")
    atomic_write_text(path, format_kv(items, "viinit run manifest"))
    return path


def _load_init_config(args) -> InitConfig:
    cfg = init_config_from_kv(read_kv(args.config)) if getattr(args, "config", None) else InitConfig()
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "window", None) is not None:
        kw["window_length"] = args.window
    if getattr(args, "disable_step3", False):
        kw["enable_step3"] = False
    if getattr(args, "disable_step4", False):
        kw["enable_step4"] = False
    return replace(cfg, **kw)


# --------------------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    t = time.perf_counter()
    kv = read_kv(args.config) if args.config else {}
    if args.seed is not None:
        kv["seed"] = args.seed
    cfg = config_from_kv(kv)
    ds = simulate(cfg)
    outputs = write_dataset(ds.to_bundle(), args.out)
    write_manifest(args.out, "simulate", kv, [args.config] if args.config else [], cfg.seed,
                   {"simulate": time.perf_counter() - t}, outputs)
    print(f"wrote {len(ds.keyframe_ids)} keyframes, {len(ds.imu)} IMU samples, {len(ds.tracks)} tracks to {args.out}")
    return EXIT_OK


def _states_csv(result) -> str:
    lines = ["#timestamp [ns],p_x [m],p_y [m],p_z [m],q_w [],q_x [],q_y [],q_z [],v_x [m s^-1],v_y [m s^-1],v_z [m s^-1]"]
    for kid, s in zip(result.keyframe_ids, result.states):
        vals = list(s.p_wb) + list(matrix_to_quat_wxyz(s.R_wb)) + list(s.v_w)
        lines.append(",".join([str(kid)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def _reports_csv(result) -> str:
    lines = ["step,initial_cost,final_cost,iterations,termination,dropped_residuals,seconds"]
    for step, rep in result.reports.items():
        lines.append(",".join([step, repr(rep.initial_cost), repr(rep.final_cost), str(rep.iterations),
                               rep.termination_reason, str(rep.dropped_residuals),
                               repr(float(result.timings.get(step, float("nan"))))]))
    return "\n".join(lines) + "\n"


def _result_kv(result) -> dict:
    out = {"status": result.status, "failed_stage": result.failed_stage or "", "keyframes": len(result.keyframe_ids)}
    if result.inertial is not None:
        out["gyro_bias"] = result.inertial.bias.gyro_bias
        out["accel_bias"] = result.inertial.bias.accel_bias
        out["gravity_dir"] = result.inertial.gravity_dir
        out["gravity_magnitude"] = result.inertial.gravity_mag
    for i, note in enumerate(result.notes):
        out[f"note.{i}"] = note
    return out


def _write_result(out_dir, result, bundle, mode):
    from viinit.plotting import plot_trajectory

    paths = {
        "result.txt": format_kv(_result_kv(result), "initialization result"),
        "states.csv": _states_csv(result),
        "reports.csv": _reports_csv(result),
    }
    metrics = {}
    if bundle.ground_truth and result.inertial is not None:
        rep = evaluate_result(result, bundle, mode)
        gt = ground_truth_states(bundle, result.keyframe_ids)
        gt_bias = min(bundle.ground_truth, key=lambda s: abs(s.timestamp - ns_to_s(result.keyframe_ids[0]))).bias
        g = result.inertial.gravity_dir
        metrics = {
            "ate_mode": mode,
            "ate_m": rep.ate_rmse,
            "rotation_error_deg": rep.rotation_error,
            "rotation_error_raw_deg": rep.rotation_error_raw,
            "gyro_bias_error": float(np.linalg.norm(result.inertial.bias.gyro_bias - gt_bias.gyro_bias)),
            "accel_bias_error": float(np.linalg.norm(result.inertial.bias.accel_bias - gt_bias.accel_bias)),
            "gravity_dir_error_rad": float(np.arccos(np.clip(-g[2], -1.0, 1.0))),
        }
        paths["metrics.txt"] = format_kv(metrics, "metrics against ground truth")
    written = []
    for name, text in paths.items():
        p = os.path.join(out_dir, name)
        atomic_write_text(p, text)
        written.append(p)
    if result.states:
        gt = ground_truth_states(bundle, result.keyframe_ids) if bundle.ground_truth else None
        written.append(plot_trajectory(result.states, gt, os.path.join(out_dir, "trajectory.svg")))
    return written, metrics


def cmd_init(args) -> int:
    cfg = _load_init_config(args)
    bundle = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    code = EXIT_OK
    try:
        result = run_initialization(bundle, cfg, t_start=args.t_start)
    except StageError as exc:
        if exc.partial is None:
            raise
        result = replace(exc.partial, status="partial", failed_stage=exc.stage,
                         notes=[f"{exc.stage} failed: {exc.cause}"])
        code = EXIT_PARTIAL
    if result.status != "ok":
        code = EXIT_PARTIAL
    outputs, metrics = _write_result(args.out, result, bundle, args.ate_mode)
    write_manifest(args.out, "init", init_config_to_kv(cfg), [args.dataset] + ([args.config] if args.config else []),
                   cfg.seed, result.timings, outputs)
    print(f"status={result.status}" + (f" ate={metrics['ate_m']:.6g} m" if metrics else ""))
    return code


def cmd_evaluate(args) -> int:
    from viinit.plotting import plot_segments

    cfg = _load_init_config(args)
    bundle = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    t = time.perf_counter()
    reports = exhaustive_protocol(bundle, args.interval, config=cfg, mode=args.ate_mode)
    elapsed = time.perf_counter() - t
    agg = aggregate(reports)
    outputs = []
    for name, text in (("segments.csv", segments_csv(reports)), ("summary.txt", format_kv(agg, "protocol summary"))):
        p = os.path.join(args.out, name)
        atomic_write_text(p, text)
        outputs.append(p)
    outputs.append(plot_segments(reports, os.path.join(args.out, "segments.svg")))
    write_manifest(args.out, "evaluate", dict(init_config_to_kv(cfg), interval=args.interval, ate_mode=args.ate_mode),
                   [args.dataset] + ([args.config] if args.config else []), cfg.seed, {"protocol": elapsed}, outputs)
    print(f"{agg['attempted']} segments, {agg['failed']} failed, mean ATE {agg['mean_ate_rmse']:.6g} m")
    return EXIT_PARTIAL if agg["failed"] else EXIT_OK


def cmd_compare(args) -> int:
    from viinit.plotting import plot_comparison

    cfg = _load_init_config(args)
    if (args.dataset is None) == (args.spec is None):
        raise ConfigError("compare needs exactly one of a dataset directory or --spec")
    if args.spec:
        base = config_from_kv(read_kv(args.spec))
        source = lambda seed: simulate(replace(base, seed=seed)).to_bundle()  # noqa: E731
        name = args.sequence or os.path.splitext(os.path.basename(args.spec))[0]
    else:
        source = load_dataset(args.dataset)
        name = args.sequence or os.path.basename(os.path.normpath(args.dataset))
    os.makedirs(args.out, exist_ok=True)
    t = time.perf_counter()
    report = compare_strategies(source, cfg, args.seeds, sequence=name, mode=args.ate_mode,
                                seed0=args.seed if args.seed is not None else 0)
    elapsed = time.perf_counter() - t
    outputs = []
    for fname, text in (("compare_seeds.csv", seeds_csv([report])),
                        ("compare_ate.csv", summary_csv([report], "ate_rmse")),
                        ("compare_rotation.csv", summary_csv([report], "rotation_error"))):
        p = os.path.join(args.out, fname)
        atomic_write_text(p, text)
        outputs.append(p)
    outputs.append(plot_comparison(report, os.path.join(args.out, "compare.svg")))
    inputs = [args.dataset or args.spec] + ([args.config] if args.config else [])
    write_manifest(args.out, "compare", dict(init_config_to_kv(cfg), seeds=args.seeds, ate_mode=args.ate_mode),
                   inputs, cfg.seed, {"compare": elapsed}, outputs)
    print(f"{name}: win rate {report.win_rate:.3f} over {len(report.seeds)} seeds")
    return EXIT_PARTIAL if any(s.outcome == "failed" for s in report.seeds) else EXIT_OK


def cmd_convert_calib(args) -> int:
    calib = calibration_from_euroc_yaml(args.cam0, args.cam1, args.imu)
    atomic_write_text(args.out, format_calibration(calib))
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viinit", description="Stereo visual-inertial initialization toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        if dataset:
            sp.add_argument("dataset", help="EuRoC-layout dataset directory")
        sp.add_argument("--config", help="key = value init config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--window", type=float, help="window length in seconds")
        sp.add_argument("--disable-step3", action="store_true", help="skip the decoupled refinement")
        sp.add_argument("--disable-step4", action="store_true", help="skip joint visual-inertial BA")
        sp.add_argument("--ate-mode", choices=("raw", "aligned"), default="aligned")
        sp.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="write a synthetic EuRoC-layout dataset")
    s.add_argument("--config", help="key = value scene spec")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("init", help="run one initialization")
    common(s)
    s.add_argument("--t-start", type=float, help="window start in seconds (default: first keyframe)")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("evaluate", help="initialize every --interval seconds and score against ground truth")
    common(s)
    s.add_argument("--interval", type=float, default=2.5)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="decoupled refinement vs 6-DoF BA over seeds")
    common(s, dataset=False)
    s.add_argument("dataset", nargs="?", help="dataset directory (or use --spec)")
    s.add_argument("--spec", help="scene spec; a fresh dataset is simulated per seed")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--sequence", help="sequence name for the CSV rows")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("convert-calib", help="EuRoC sensor.yaml files to calibration.txt")
    s.add_argument("cam0")
    s.add_argument("cam1")
    s.add_argument("imu")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert_calib)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return EXIT_PARTIAL if exc.partial is not None else exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ViInitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
