"""Readers for the solver's delimited outputs.

Only the documented CSV surfaces are consumed: seismograms
(``time,u,v,w``), the clustering report (header comments, per-cluster
table, optional histogram section), and the partition report (per-partition
per-cluster counts).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class InputError(ValueError):
    pass


@dataclass
class Seismogram:
    times: np.ndarray
    data: np.ndarray  # (nt, 3) velocity channels

    @property
    def sample_dt(self) -> float:
        return float(self.times[1] - self.times[0])


def read_seismogram(path) -> Seismogram:
    times, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["time", "u", "v", "w"]:
            raise InputError(f"{path}: not a seismogram CSV (header {header})")
        for rec in reader:
            times.append(float(rec[0]))
            rows.append([float(x) for x in rec[1:4]])
    if not rows:
        raise InputError(f"{path}: empty seismogram")
    return Seismogram(np.array(times), np.array(rows))


@dataclass
class ClusterReport:
    lam: float
    dt_min: float
    dt_max: float
    speedup: float
    counts: np.ndarray  # (nc,)
    lower: np.ndarray  # (nc,) seconds
    upper: np.ndarray  # (nc,) seconds, inf for the open-ended cluster
    hist_edges: np.ndarray | None = None  # (nbins + 1,)
    hist_counts: np.ndarray | None = None  # (nbins,)


def read_cluster_report(path) -> ClusterReport:
    meta = {}
    rows = []
    hist = []
    section = "clusters"
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, val = line[1:].split(",", 1)
                meta[key.strip()] = float(val)
                continue
            if line == "histogram":
                section = "hist_header"
                continue
            if section == "hist_header":
                section = "hist"
                continue
            if line.startswith("cluster,"):
                continue
            (hist if section == "hist" else rows).append(line.split(","))
    if not rows:
        raise InputError(f"{path}: no cluster rows")
    counts = np.array([int(r[1]) for r in rows])
    lower = np.array([float(r[2]) for r in rows])
    upper = np.array([float(r[3]) for r in rows])
    edges = counts_h = None
    if hist:
        edges = np.array([float(r[0]) for r in hist] + [float(hist[-1][1])])
        counts_h = np.array([int(r[2]) for r in hist])
    return ClusterReport(
        lam=meta.get("lambda", float("nan")),
        dt_min=meta.get("dt_min", lower.min()),
        dt_max=meta.get("dt_max", float("nan")),
        speedup=meta.get("theoretical_speedup", float("nan")),
        counts=counts,
        lower=lower,
        upper=upper,
        hist_edges=edges,
        hist_counts=counts_h,
    )


@dataclass
class PartitionReport:
    counts: np.ndarray  # (p, nc) per-partition per-cluster element counts
    totals: np.ndarray  # (p,)


def read_partition_report(path) -> PartitionReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "partition":
            raise InputError(f"{path}: not a partition report")
        nc = len(header) - 2
        rows = []
        for rec in reader:
            rows.append([int(x) for x in rec[1 : 1 + nc]])
    if not rows:
        raise InputError(f"{path}: empty partition report")
    counts = np.array(rows)
    return PartitionReport(counts=counts, totals=counts.sum(axis=1))
