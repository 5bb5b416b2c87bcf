"""Result plots from run CSVs.

Two flavors, picked by sniffing the header row: a tracking CSV
(frame_index, t_err_m, r_err_rad, score, status) becomes stacked
error-over-time panels with lost frames flagged; a trajectory CSV
(tick, phase, q*, s, backstep, min_distance) becomes follower progress
with backstep events and the clearance margin.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import TICK_RATE

__all__ = ["plot_csv", "plot_tracking", "plot_trajectory"]


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [r for r in reader if r]
    return header, rows


def plot_tracking(header: list[str], rows: list[list[str]], out) -> None:
    col = {name: i for i, name in enumerate(header)}
    t = np.array([float(r[col["frame_index"]]) for r in rows]) / TICK_RATE
    t_err = np.array([float(r[col["t_err_m"]]) for r in rows])
    r_err = np.array([float(r[col["r_err_rad"]]) for r in rows])
    ok = np.array([r[col["status"]] == "ok" for r in rows])

    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 4.5))
    ax1.plot(t, 1e3 * t_err, lw=0.9, color="tab:blue")
    ax1.set_ylabel("translation error [mm]")
    ax2.plot(t, r_err, lw=0.9, color="tab:orange")
    ax2.set_ylabel("rotation error [rad]")
    ax2.set_xlabel("time [s]")
    if (~ok).any():
        for ax in (ax1, ax2):
            ax.plot(t[~ok], np.zeros((~ok).sum()), "x", color="tab:red",
                    ms=4, label="not tracked")
        ax1.legend(loc="upper right", fontsize=8)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_trajectory(header: list[str], rows: list[list[str]], out) -> None:
    col = {name: i for i, name in enumerate(header)}
    t = np.array([float(r[col["tick"]]) for r in rows]) / TICK_RATE
    s = np.array([float(r[col["s"]]) for r in rows])
    back = np.array([r[col["backstep"]] not in ("0", "", "False") for r in rows])
    dist = np.array([float(r[col["min_distance"]]) for r in rows])
    phases = [r[col["phase"]] for r in rows]

    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 4.5))
    ax1.plot(t, s, lw=0.9, color="tab:blue")
    if back.any():
        ax1.plot(t[back], s[back], ".", color="tab:red", ms=4,
                 label=f"backstep ({int(back.sum())})")
        ax1.legend(loc="lower right", fontsize=8)
    ax1.set_ylabel("trajectory parameter s")
    # shade everything past the approach so phase changes are visible
    seen = None
    for i, ph in enumerate(phases):
        if ph != seen and ph not in ("approach", "backstep"):
            ax1.axvline(t[i], color="gray", lw=0.7, alpha=0.6)
            ax1.text(t[i], 1.02, ph, fontsize=7, rotation=90,
                     transform=ax1.get_xaxis_transform())
        seen = ph
    finite = np.isfinite(dist)
    ax2.plot(t[finite], np.minimum(dist[finite], 0.5), lw=0.9,
             color="tab:green")
    ax2.axhline(0.0, color="tab:red", lw=0.7)
    ax2.set_ylabel("min pair distance [m]")
    ax2.set_xlabel("time [s]")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_csv(path, out) -> None:
    """Render whichever CSV flavor ``path`` holds into ``out`` (svg/png)."""
    header, rows = _read_rows(path)
    if "t_err_m" in header:
        plot_tracking(header, rows, out)
    elif "min_distance" in header:
        plot_trajectory(header, rows, out)
    else:
        raise ValueError(f"unrecognized CSV header: {header}")
