"""Plot-ready data files and matplotlib figures for a finished sweep."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from hcfloop.loop import PowerTrace

# One file per panel: (x field, y field, series field)
PANELS = {
    "snr_vs_power": ("launch_power_dbm", "snr_db", "n_loops"),
    "air_vs_power": ("launch_power_dbm", "air_gbps", "n_loops"),
    "snr_vs_loops": ("n_loops", "snr_db", "launch_power_dbm"),
    "air_vs_loops": ("n_loops", "air_gbps", "launch_power_dbm"),
}

_STYLE = {
    "figure.figsize": (4.2, 3.0),
    "figure.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}
_COLORS = {"hcf": "tab:red", "smf": "tab:blue"}


def _series(records, x, y, key):
    """``{(fut_kind, key value): (xs, ys)}`` averaged over seeds, x-sorted."""
    acc = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.error:
            continue
        value = getattr(r, y)
        if np.isfinite(value):
            acc[(r.fut_kind, getattr(r, key))][getattr(r, x)].append(value)
    out = {}
    for k, pts in sorted(acc.items()):
        xs = sorted(pts)
        out[k] = (np.array(xs, dtype=float), np.array([np.mean(pts[v]) for v in xs]))
    return out


def write_plot_data(records, out_dir) -> list:
    """Write ``plot_<panel>.csv`` files with columns fut_kind, series, x, y."""
    out_dir = Path(out_dir)
    paths = []
    for name, (x, y, key) in PANELS.items():
        path = out_dir / f"plot_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fut_kind", key, x, y])
            for (fut, k), (xs, ys) in _series(records, x, y, key).items():
                for xv, yv in zip(xs, ys):
                    w.writerow([fut, f"{k:g}", f"{xv:g}", f"{yv:.6f}"])
        paths.append(path)
    return paths


def render_figures(records, traces, out_dir, fmt="png") -> list:
    """Render the four sweep panels and the monitor traces.

    Panels with a single x value are skipped, since a line through one point
    carries no trend.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    labels = {
        "launch_power_dbm": "Total launch power (dBm)",
        "n_loops": "Number of loops",
        "snr_db": "SNR (dB)",
        "air_gbps": "AIR (Gb/s)",
    }
    with plt.rc_context(_STYLE):
        for name, (x, y, key) in PANELS.items():
            series = _series(records, x, y, key)
            if not series or all(xs.size < 2 for xs, _ in series.values()):
                continue
            fig, ax = plt.subplots()
            for (fut, k), (xs, ys) in series.items():
                if xs.size < 2:
                    continue
                tag = f"{k:g} loops" if key == "n_loops" else f"{k:g} dBm"
                ax.plot(xs, ys, "o-", ms=3, color=_COLORS.get(fut), label=f"{fut.upper()}, {tag}",
                        alpha=0.5 + 0.5 * (k == max(kk for f, kk in series if f == fut)))
            ax.set_xlabel(labels[x])
            ax.set_ylabel(labels[y])
            ax.legend(fontsize=6, ncol=2)
            path = out_dir / f"fig_{name}.{fmt}"
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
        if traces:
            paths.append(_plot_traces(plt, traces, out_dir / f"fig_monitor_traces.{fmt}"))
    return paths


def _plot_traces(plt, traces, path):
    fig, ax = plt.subplots(figsize=(5.0, 2.6))
    for i, ((fut, p, seed), trace) in enumerate(sorted(traces.items())):
        t_ms = trace.times() * 1e3
        ax.plot(t_ms, trace.power_dbm + 4.0 * i, lw=0.6, color=_COLORS.get(fut),
                label=f"{fut.upper()} {p:g} dBm (+{4 * i} dB)")
    ax.set_xlabel("Time (ms)")
    ax.set_ylabel("Monitor power (dBm, offset)")
    ax.legend(fontsize=6)
    fig.savefig(path)
    plt.close(fig)
    return path


def trace_summary(trace: PowerTrace) -> str:
    n = trace.power_dbm.size
    return f"{n} samples at {trace.sample_interval_s * 1e6:g} us, {trace.boundary_markers.size} markers"
