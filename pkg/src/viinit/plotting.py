"""SVG figures written next to the CSV reports."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from viinit.kvfile import atomic_write_text  # noqa: E402

# fixed ids and no timestamp so reruns produce identical bytes
plt.rcParams["svg.hashsalt"] = "viinit"
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata=_SVG_META)
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())
    return path


def plot_segments(reports, path, title="initialization segments"):
    """Per-segment ATE and rotation error; failed segments marked on the axis."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    t = np.array([r.t_start for r in reports])
    ate = np.array([r.ate_rmse for r in reports])
    rot = np.array([r.rotation_error for r in reports])
    failed = np.array([not r.ok for r in reports])
    ax1.plot(t[~failed], ate[~failed] * 100.0, "o-", ms=3)
    ax1.set_ylabel("ATE [cm]")
    ax2.plot(t[~failed], rot[~failed], "o-", ms=3, color="tab:orange")
    ax2.set_ylabel("rotation error [deg]")
    ax2.set_xlabel("segment start [s]")
    for ax in (ax1, ax2):
        if failed.any():
            ax.plot(t[failed], np.zeros(failed.sum()), "rx", label="failed")
            ax.legend(loc="upper right")
        ax.grid(alpha=0.3)
    ax1.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_comparison(report, path):
    """Per-seed ATE, decoupled against 6-DoF-only, with the y = x line."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for key, marker in (("without_viba", "o"), ("with_viba", "^")):
        x = np.array([s.metrics[f"6dof_{key}"].ate_rmse for s in report.seeds]) * 100.0
        y = np.array([s.metrics[f"decoupled_{key}"].ate_rmse for s in report.seeds]) * 100.0
        ok = np.isfinite(x) & np.isfinite(y)
        if ok.any():
            ax.plot(x[ok], y[ok], marker, ms=4, ls="none", label=key.replace("_", " "))
    lim = ax.get_xlim()[1] if ax.lines else 1.0
    lim = max(lim, ax.get_ylim()[1])
    ax.plot([0, lim], [0, lim], "k--", lw=0.8)
    ax.set_xlabel("6-DoF BA ATE [cm]")
    ax.set_ylabel("decoupled ATE [cm]")
    ax.set_title(f"{report.sequence}: win rate {report.win_rate:.2f}")
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_trajectory(estimated, ground_truth, path, title="keyframe positions"):
    """Top-down view of estimated and ground-truth keyframe positions."""
    fig, ax = plt.subplots(figsize=(6, 5))
    P = np.array([s.p_wb for s in estimated])
    G = np.array([s.p_wb for s in ground_truth]) if ground_truth else None
    if G is not None:
        ax.plot(G[:, 0], G[:, 1], "k-", lw=1.0, label="ground truth")
    ax.plot(P[:, 0], P[:, 1], "o-", ms=3, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
