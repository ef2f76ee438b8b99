"""Trajectory metrics, the sliding-window initialization protocol and the
decoupled-vs-6-DoF comparison harness.

Trajectories are :class:`StampedPoses` (timestamps in seconds, body rotations,
body positions). Lists of ``KeyframeState`` / ``GroundTruthState`` are
converted automatically.
"""

from __future__ import annotations

import io
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from viinit.errors import InsufficientDataError, ViInitError, StageError
from viinit.euroc_io import DatasetBundle, slice as slice_bundle
from viinit.geometry import project_to_so3, so3_exp, so3_log
from viinit.pipeline import InitConfig, InitResult, ground_truth_states, run_variants, run_initialization

log = logging.getLogger(__name__)

ASSOCIATION_GATE = 5e-3
ATE_MODES = ("raw", "aligned")
TIE_TOL = 1e-9

SEGMENT_HEADER = [
    "segment", "t_start", "status", "ate_m", "rotation_error_deg", "rotation_error_raw_deg",
    "n_keyframes", "failed_stage", "message",
]
SEED_HEADER = [
    "sequence", "seed",
    "ate_6dof_without_viba", "ate_decoupled_without_viba", "ate_6dof_with_viba", "ate_decoupled_with_viba",
    "rot_6dof_without_viba", "rot_decoupled_without_viba", "rot_6dof_with_viba", "rot_decoupled_with_viba",
    "outcome",
]
SUMMARY_HEADER = [
    "sequence", "n_seeds",
    "6dof_without_viba", "decoupled_without_viba", "6dof_with_viba", "decoupled_with_viba",
    "wins", "ties", "win_rate",
]


@dataclass(frozen=True)
class StampedPoses:
    t: np.ndarray
    R: np.ndarray
    P: np.ndarray

    @classmethod
    def from_states(cls, states):
        if isinstance(states, StampedPoses):
            return states
        states = list(states)
        return cls(
            np.array([float(s.timestamp) for s in states]),
            np.array([s.R_wb for s in states], dtype=float).reshape(-1, 3, 3),
            np.array([s.p_wb for s in states], dtype=float).reshape(-1, 3),
        )

    def __len__(self):
        return len(self.t)


def associate(est: StampedPoses, gt: StampedPoses, gate: float = ASSOCIATION_GATE):
    """Index pairs ``(i_est, i_gt)`` by nearest ground-truth timestamp within ``gate``."""
    if len(gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt.t)
    ts = gt.t[order]
    pos = np.clip(np.searchsorted(ts, est.t), 1, max(len(ts) - 1, 1))
    left = ts[pos - 1]
    right = ts[np.minimum(pos, len(ts) - 1)]
    pick = np.where(np.abs(est.t - left) <= np.abs(right - est.t), pos - 1, np.minimum(pos, len(ts) - 1))
    ok = np.abs(ts[pick] - est.t) <= gate
    return np.nonzero(ok)[0], order[pick[ok]]


def rigid_alignment(A, B):
    """``(R, t)`` minimizing ``sum |R a_i + t - b_i|^2`` (no scale)."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    U, _, Vt = np.linalg.svd((A - ca).T @ (B - cb))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def _pairs(estimated, ground_truth, minimum):
    est = StampedPoses.from_states(estimated)
    gt = StampedPoses.from_states(ground_truth)
    ie, ig = associate(est, gt)
    if len(ie) < minimum:
        raise InsufficientDataError(f"{len(ie)} associated poses, need {minimum}")
    return est, gt, ie, ig


def position_errors(estimated, ground_truth, mode: str = "aligned") -> np.ndarray:
    if mode not in ATE_MODES:
        raise ValueError(f"mode must be one of {ATE_MODES}")
    est, gt, ie, ig = _pairs(estimated, ground_truth, 2)
    A, B = est.P[ie], gt.P[ig]
    if mode == "aligned":
        R, t = rigid_alignment(A, B)
        A = A @ R.T + t
    return np.linalg.norm(A - B, axis=1)


def ate(estimated, ground_truth, mode: str = "aligned") -> float:
    """Position RMSE after association; ``aligned`` applies a rigid (no scale) fit first."""
    e = position_errors(estimated, ground_truth, mode)
    return float(np.sqrt(np.mean(e**2)))


def _angles(Q):
    return np.array([np.linalg.norm(so3_log(q, check=False)) for q in Q])


def rotation_alignment(Q):
    """Rotation ``A`` minimizing ``sum angle(A^T Q_i)^2`` (geodesic mean), started at the identity.

    ``Q_i = R_gt_i R_est_i^T``. Each Gauss-Newton step is kept only if it lowers the
    objective, so the result is never worse than no alignment.
    """
    A = np.eye(3)
    cost = float(np.sum(_angles(Q) ** 2))
    start = project_to_so3(np.sum(Q, axis=0))
    c = float(np.sum(_angles(np.einsum("ji,njk->nik", start, Q)) ** 2))
    if c < cost:
        A, cost = start, c
    for _ in range(50):
        step = np.mean([so3_log(A.T @ q, check=False) for q in Q], axis=0)
        if np.linalg.norm(step) < 1e-15:
            break
        cand = A @ so3_exp(step)
        c = float(np.sum(_angles(np.einsum("ji,njk->nik", cand, Q)) ** 2))
        if not c < cost:
            break
        A, cost = cand, c
    return A


def rotation_errors(estimated, ground_truth, mode: str = "aligned") -> np.ndarray:
    """Per-pair geodesic angle of ``R_gt^T R_align R_est`` in degrees."""
    if mode not in ATE_MODES:
        raise ValueError(f"mode must be one of {ATE_MODES}")
    est, gt, ie, ig = _pairs(estimated, ground_truth, 1)
    Re, Rg = est.R[ie], gt.R[ig]
    A = rotation_alignment(np.einsum("nij,nkj->nik", Rg, Re)) if mode == "aligned" else np.eye(3)
    E = np.einsum("nji,jk,nkl->nil", Rg, A, Re)
    return np.degrees(_angles(E))


def rotation_error(estimated, ground_truth, mode: str = "aligned") -> float:
    """RMS geodesic rotation error in degrees."""
    e = rotation_errors(estimated, ground_truth, mode)
    return float(np.sqrt(np.mean(e**2)))


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricReport:
    ate_rmse: float
    rotation_error: float
    rotation_error_raw: float
    alignment_mode: str
    segment: int = 0
    t_start: float = 0.0
    status: str = "ok"
    n_keyframes: int = 0
    failed_stage: str = ""
    message: str = ""
    position_errors: tuple = ()

    def __post_init__(self):
        for v in (self.ate_rmse, self.rotation_error, self.rotation_error_raw):
            if not (math.isnan(v) or v >= 0):
                raise ValueError("metrics must be non-negative")

    @property
    def ok(self) -> bool:
        return self.status != "failed"


def evaluate_result(result: InitResult, bundle: DatasetBundle, mode: str = "aligned", **kw) -> MetricReport:
    gt = ground_truth_states(bundle, result.keyframe_ids)
    pe = position_errors(result.states, gt, mode)
    return MetricReport(
        ate_rmse=float(np.sqrt(np.mean(pe**2))),
        rotation_error=rotation_error(result.states, gt, mode),
        rotation_error_raw=rotation_error(result.states, gt, "raw"),
        alignment_mode=mode,
        status=result.status,
        n_keyframes=len(result.keyframe_ids),
        position_errors=tuple(float(x) for x in pe),
        **kw,
    )


def aggregate(reports) -> dict:
    """Mean/median over successful segments plus attempt and failure counts."""
    ok = [r for r in reports if r.ok]
    out = {"attempted": len(reports), "failed": len(reports) - len(ok)}
    for key in ("ate_rmse", "rotation_error", "rotation_error_raw"):
        vals = np.array([getattr(r, key) for r in ok], dtype=float)
        out[f"mean_{key}"] = float(np.mean(vals)) if len(vals) else float("nan")
        out[f"median_{key}"] = float(np.median(vals)) if len(vals) else float("nan")
    return out


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("VIINIT_THREADS")
    cap = int(env) if env and env.strip().isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, n_jobs))


def segment_starts(t_first: float, t_last: float, interval: float, window_length: float):
    if interval <= 0:
        raise ValueError("interval must be positive")
    span = t_last - t_first
    if span < window_length - 1e-9:
        raise InsufficientDataError(f"dataset spans {span:.3f} s, shorter than the {window_length} s window")
    n = int(math.floor((span - window_length) / interval + 1e-9)) + 1
    return [t_first + i * interval for i in range(n)]


def exhaustive_protocol(bundle: DatasetBundle, interval: float = 2.5, window_length: float | None = None,
                        config: InitConfig | None = None, mode: str = "aligned", threads: int | None = None):
    """Start an initialization every ``interval`` seconds and score each against ground truth.

    Failing segments are reported with ``status="failed"`` and NaN metrics.
    """
    config = config or InitConfig()
    if window_length is not None:
        config = replace(config, window_length=window_length)
    t_first, t_last = bundle.time_range
    starts = segment_starts(t_first, t_last, interval, config.window_length)

    def run(item):
        i, t0 = item
        try:
            part = slice_bundle(bundle, t0, t0 + config.window_length)
            res = run_initialization(part, config, t_start=t0)
            return evaluate_result(res, part, mode, segment=i, t_start=t0,
                                   message="; ".join(res.notes))
        except ViInitError as exc:
            stage = exc.stage if isinstance(exc, StageError) else ""
            cause = exc.cause if isinstance(exc, StageError) else exc
            nan = float("nan")
            return MetricReport(nan, nan, nan, mode, segment=i, t_start=t0, status="failed",
                                failed_stage=stage, message=f"{type(cause).__name__}: {cause}")

    items = list(enumerate(starts))
    workers = threads or worker_count(len(items))
    if workers == 1:
        return [run(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def segments_csv(reports) -> str:
    return _csv(SEGMENT_HEADER, [
        (r.segment, r.t_start, r.status, r.ate_rmse, r.rotation_error, r.rotation_error_raw, r.n_keyframes,
         r.failed_stage, r.message)
        for r in reports
    ])


# --------------------------------------------------------------------------- comparison

VARIANTS = {
    "6dof_without_viba": (False, False),
    "decoupled_without_viba": (True, False),
    "6dof_with_viba": (False, True),
    "decoupled_with_viba": (True, True),
}


@dataclass
class SeedComparison:
    seed: int
    metrics: dict  # variant name -> MetricReport
    outcome: str   # win | loss | tie | failed


@dataclass
class ComparisonReport:
    sequence: str
    seeds: list = field(default_factory=list)

    @property
    def wins(self) -> int:
        return sum(s.outcome == "win" for s in self.seeds)

    @property
    def ties(self) -> int:
        return sum(s.outcome == "tie" for s in self.seeds)

    @property
    def win_rate(self) -> float:
        return self.wins / len(self.seeds) if self.seeds else float("nan")

    def mean(self, variant: str, key: str = "ate_rmse") -> float:
        vals = [getattr(s.metrics[variant], key) for s in self.seeds if s.outcome != "failed"]
        return float(np.mean(vals)) if vals else float("nan")

    def median(self, variant: str, key: str = "ate_rmse") -> float:
        vals = [getattr(s.metrics[variant], key) for s in self.seeds if s.outcome != "failed"]
        return float(np.median(vals)) if vals else float("nan")


def _outcome(decoupled: float, baseline: float) -> str:
    if abs(decoupled - baseline) <= TIE_TOL:
        return "tie"
    return "win" if decoupled < baseline else "loss"


def compare_strategies(dataset, config: InitConfig | None = None, n_seeds: int = 10, sequence: str = "sim",
                       mode: str = "aligned", seed0: int = 0, with_viba: bool = True, threads: int | None = None):
    """Decoupled refinement vs 6-DoF-only, with and without joint VI-BA, on identical data per seed.

    ``dataset`` is a :class:`DatasetBundle` (shared by every seed; the seed
    then drives only the pipeline's own randomness) or a callable
    ``seed -> DatasetBundle``. A seed is a win when the decoupled variant's
    ATE without VI-BA is lower than the 6-DoF variant's.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    config = config or InitConfig()

    def run(seed):
        bundle = dataset(seed) if callable(dataset) else dataset
        cfg = replace(config, seed=seed)
        try:
            variants = run_variants(bundle, cfg, with_step4=with_viba)
        except ViInitError as exc:
            log.warning("seed %d failed: %s", seed, exc)
            nan = float("nan")
            failed = MetricReport(nan, nan, nan, mode, status="failed", message=str(exc))
            return SeedComparison(seed, {k: failed for k in VARIANTS}, "failed")
        metrics = {}
        nan = float("nan")
        for name, key in VARIANTS.items():
            metrics[name] = (evaluate_result(variants[key], bundle, mode) if key in variants
                             else MetricReport(nan, nan, nan, mode, status="skipped"))
        return SeedComparison(seed, metrics, _outcome(metrics["decoupled_without_viba"].ate_rmse,
                                                      metrics["6dof_without_viba"].ate_rmse))

    seeds = list(range(seed0, seed0 + n_seeds))
    workers = threads or worker_count(len(seeds))
    if workers == 1:
        rows = [run(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, seeds))
    return ComparisonReport(sequence, rows)


def seeds_csv(reports) -> str:
    rows = []
    for rep in reports:
        for s in rep.seeds:
            rows.append([rep.sequence, s.seed]
                        + [s.metrics[v].ate_rmse for v in VARIANTS]
                        + [s.metrics[v].rotation_error for v in VARIANTS]
                        + [s.outcome])
    return _csv(SEED_HEADER, rows)


def summary_csv(reports, key: str = "ate_rmse") -> str:
    """One row per sequence: mean metric per variant, wins, ties, win rate."""
    rows = [[rep.sequence, len(rep.seeds)] + [rep.mean(v, key) for v in VARIANTS]
            + [rep.wins, rep.ties, rep.win_rate] for rep in reports]
    return _csv(SUMMARY_HEADER, rows)
