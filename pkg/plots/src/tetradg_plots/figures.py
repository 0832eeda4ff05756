"""The three figure kinds rendered from the solver's CSV outputs.

Every number drawn on a figure is recomputed here from the input CSVs; the
renderers return those numbers so tests (and the CLI) can check them against
the solver's own reports.  Rendering is deterministic for fixed inputs:
fixed figure geometry, no timestamps in the metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .filters import lowpass
from .io import (
    InputError,
    read_cluster_report,
    read_partition_report,
    read_seismogram,
)

_CHANNELS = ("u", "v", "w")
_SAVE_OPTS = dict(dpi=110, metadata={"Software": "tetradg-plot"})


def misfit(data: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-channel normalized squared difference, the solver's metric."""
    denom = np.sum(ref * ref, axis=0)
    if np.any(denom == 0):
        raise InputError("reference channel with zero energy")
    return np.sum((data - ref) ** 2, axis=0) / denom


def plot_seismogram_compare(run_csv, ref_csv, out_path, cutoff_hz: float | None = None):
    """Overlay and difference panels with recomputed misfit annotations."""
    s = read_seismogram(run_csv)
    r = read_seismogram(ref_csv)
    if s.times.shape != r.times.shape or not np.allclose(s.times, r.times):
        raise InputError("sampling mismatch between run and reference")
    data, ref = s.data, r.data
    if cutoff_hz is not None:
        data = lowpass(data, s.sample_dt, cutoff_hz)
        ref = lowpass(ref, s.sample_dt, cutoff_hz)
    e = misfit(data, ref)

    fig, (ax_top, ax_bot) = plt.subplots(
        2, 1, figsize=(7.2, 4.8), sharex=True, constrained_layout=True
    )
    for c, name in enumerate(_CHANNELS):
        ax_top.plot(s.times, ref[:, c], color="black", lw=1.2,
                    label="reference" if c == 0 else None)
        ax_top.plot(s.times, data[:, c], color="tab:red", lw=0.8,
                    label="run" if c == 0 else None)
        ax_bot.plot(s.times, data[:, c] - ref[:, c], lw=0.8,
                    label=f"{name}: E={e[c]:.3e}")
    ax_top.set_ylabel("particle velocity")
    ax_top.legend(loc="upper right", fontsize=8)
    if cutoff_hz is not None:
        ax_top.set_title(f"low-pass {cutoff_hz:g} Hz (zero-phase Butterworth)")
    ax_bot.set_ylabel("difference")
    ax_bot.set_xlabel("time (s)")
    ax_bot.legend(loc="upper right", fontsize=8)
    fig.savefig(out_path, **_SAVE_OPTS)
    plt.close(fig)
    return {"misfit": e}


def plot_cluster_density(report_csv, out_path):
    """Timestep density with the cluster boxes and per-cluster counts."""
    rep = read_cluster_report(report_csv)
    total = rep.counts.sum()
    if total == 0:
        raise InputError("cluster report has no elements")
    scale = rep.dt_min
    lower = rep.lower / scale
    cap = rep.dt_max / scale if np.isfinite(rep.dt_max) else lower[-1] * 2
    upper = np.where(np.isfinite(rep.upper), rep.upper / scale, max(cap, lower[-1] * 1.05))
    upper = np.maximum(upper, lower * (1 + 1e-9))
    widths = upper - lower
    heights = rep.counts / total / widths
    areas = heights * widths

    fig, ax = plt.subplots(figsize=(6.8, 3.6), constrained_layout=True)
    for lo, w, h, n in zip(lower, widths, heights, rep.counts):
        ax.add_patch(plt.Rectangle((lo, 0), w, h, facecolor="0.8", edgecolor="0.4"))
        ax.annotate(str(int(n)), (lo + w / 2, h), ha="center", va="bottom", fontsize=8)
    dens_max = 0.0
    if rep.hist_edges is not None and rep.hist_counts.sum() > 0:
        edges = rep.hist_edges / scale
        dens = rep.hist_counts / total / np.diff(edges)
        dens_max = float(dens.max())
        ax.stairs(dens, edges, color="black", lw=1.2)
    ax.set_xlim(0, max(upper.max(), 1.0) * 1.05)
    ax.set_ylim(0, max(heights.max(), dens_max) * 1.25)
    ax.set_xlabel("time step relative to dt_min")
    ax.set_ylabel("element density")
    ax.set_title(
        f"lambda = {rep.lam:.2f}, theoretical speedup {rep.speedup:.2f}x"
    )
    fig.savefig(out_path, **_SAVE_OPTS)
    plt.close(fig)
    return {"areas": areas, "counts": rep.counts, "lam": rep.lam}


def plot_partition_loads(report_csv, out_path):
    """Stacked per-cluster element counts, partitions sorted by total."""
    rep = read_partition_report(report_csv)
    order = np.argsort(rep.totals, kind="stable")
    counts = rep.counts[order]
    totals = rep.totals[order]
    ratio = totals.max() / max(totals.min(), 1)

    fig, ax = plt.subplots(figsize=(6.8, 3.6), constrained_layout=True)
    x = np.arange(counts.shape[0])
    bottom = np.zeros(counts.shape[0])
    for l in range(counts.shape[1]):
        ax.bar(x, counts[:, l], bottom=bottom, label=f"C{l + 1}", width=0.8)
        bottom += counts[:, l]
    ax.set_xlabel("partition (sorted by total elements)")
    ax.set_ylabel("elements")
    ax.set_title(f"max/min elements = {ratio:.2f}x")
    ax.legend(fontsize=8)
    fig.savefig(out_path, **_SAVE_OPTS)
    plt.close(fig)
    return {"totals": totals, "ratio": ratio}
