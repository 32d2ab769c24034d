"""Static figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from gateracer.track import Track  # noqa: E402


def _draw_gates(ax, track: Track, color="k"):
    for i, g in enumerate(track.gates):
        lateral = g.rotation[:, 1] * g.width / 2
        a, b = g.center - lateral, g.center + lateral
        ax.plot([a[0], b[0]], [a[1], b[1]], color=color, lw=2.5, solid_capstyle="butt")
        ax.annotate(str(i), g.center[:2], textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.plot(*track.start_pos[:2], marker="^", color="tab:green", ms=8, ls="none", label="start")


def plot_trajectory(path, positions: np.ndarray, speeds: np.ndarray, track: Track,
                    title: Optional[str] = None) -> None:
    """Top view coloured by speed plus an altitude trace."""
    fig, (ax, az) = plt.subplots(1, 2, figsize=(12, 5), gridspec_kw={"width_ratios": [2, 1]})
    pts = positions[:, :2].reshape(-1, 1, 2)
    segs = np.concatenate([pts[:-1], pts[1:]], axis=1)
    lc = LineCollection(segs, cmap="viridis", linewidths=2)
    lc.set_array(speeds[:-1])
    ax.add_collection(lc)
    _draw_gates(ax, track)
    ax.autoscale()
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.colorbar(lc, ax=ax, label="speed [m/s]")
    t = np.arange(len(positions))
    az.plot(t, positions[:, 2], lw=1)
    az.set_xlabel("control step")
    az.set_ylabel("z [m]")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(path, records: Sequence[dict]) -> None:
    steps = np.array([r["steps"] for r in records], dtype=float)

    def col(key):
        return np.array([np.nan if r.get(key) is None else r[key] for r in records], dtype=float)

    panels = [("crash_ratio", "crash ratio"), ("avg_lap_time", "avg lap time [s]"),
              ("mean_reward", "mean step reward"), ("lambda", "track complexity")]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(steps, col(key), lw=1)
        if key == "crash_ratio" and any("val_crash_ratio" in r for r in records):
            val = [(s, r["val_crash_ratio"]) for s, r in zip(steps, records) if "val_crash_ratio" in r]
            ax.plot(*zip(*val), "o", ms=3, label="validation")
            ax.legend(fontsize=8)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("environment steps")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_eval(path, report: dict) -> None:
    eps = report["episodes"]
    laps = [e["lap_time"] for e in eps if e["lap_time"] is not None]
    margins = [e["mean_margin"] for e in eps if e["mean_margin"] is not None]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    if laps:
        a1.hist(laps, bins=min(20, max(len(laps), 1)))
    a1.set_xlabel("lap time [s]")
    a1.set_title(f"completed {report['completed']}/{report['n_episodes']}, crashes {report['crash_count']}")
    if margins:
        a2.hist(margins, bins=min(20, max(len(margins), 1)))
    a2.set_xlabel("mean gate margin per episode [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tracks(path, tracks: Sequence[Track], max_tracks: int = 16) -> None:
    tracks = list(tracks)[:max_tracks]
    cols = min(4, len(tracks))
    rows = math.ceil(len(tracks) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 3.2 * rows), squeeze=False)
    for ax, t in zip(axes.ravel(), tracks):
        pts = np.vstack([t.start_pos, t.centers])
        ax.plot(pts[:, 0], pts[:, 1], lw=0.8, color="0.6")
        _draw_gates(ax, t)
        ax.set_aspect("equal")
        ax.set_title(f"{len(t)} gates, {t.lap_length():.0f} m", fontsize=8)
        ax.tick_params(labelsize=6)
    for ax in axes.ravel()[len(tracks):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
