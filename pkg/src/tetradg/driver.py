"""Pipeline orchestration: preprocess, run, report.

preprocess: load mesh + materials -> CFL steps -> clustering (fixed or
scanned lambda) -> element/face weights -> partition -> reorder -> write one
self-contained file per partition plus the clustering and partition reports.

run: read the partition files, rebuild the workers with no further global
communication, attach sources and receivers, drive the clustered schedule
over the in-process transport, and emit per-slot seismogram CSVs plus a run
summary (element-update bookkeeping, realized speedup, wall time).

report: recompute misfits between a run's seismograms and a reference set.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import partition_comm as pc
from .basis import assemble_reference_matrices
from .equations import RelaxationSet, build_element_operators, fit_relaxation
from .kernels import KernelContext
from .lts import (
    assign_clusters,
    cfl_timesteps,
    normalize_clusters,
    optimize_lambda,
    run_gts,
    theoretical_speedup,
    write_clustering_report,
)
from .mesh import compute_geometry, load_mesh
from .source_receiver import (
    PointSource,
    Receiver,
    SampledSeries,
    misfit,
    project_source,
    read_seismogram_csv,
    write_misfit_csv,
    write_seismogram_csv,
)


class ConfigError(ValueError):
    pass


class VersionError(RuntimeError):
    pass


@dataclass
class RunConfig:
    mesh: str
    materials: str
    output: str
    order: int = 4
    precision: int = 64
    mechanisms: int = 0
    center_freq: float = 1.0
    nc: int = 1
    lambda_mode: str = "fixed"  # fixed | optimize
    lam: float = 1.0
    partitions: int = 1
    width: int = 1
    t_end: float = 1.0
    cfl: float = 0.9
    mode: str = "both"  # preprocess | run | both
    receiver_dt: float = 0.01
    sources: list = field(default_factory=list)
    receivers: list = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.order <= 5:
            raise ConfigError(f"order must be in [1, 5], got {self.order}")
        if self.width < 1 or self.partitions < 1 or self.t_end <= 0:
            raise ConfigError("width >= 1, partitions >= 1, t_end > 0 required")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.lambda_mode not in ("fixed", "optimize"):
            raise ConfigError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.mode not in ("preprocess", "run", "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @classmethod
    def from_yaml(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _relaxation(cfg: RunConfig) -> RelaxationSet:
    if cfg.mechanisms == 0:
        return RelaxationSet()
    return fit_relaxation(cfg.center_freq, cfg.mechanisms)


def _partition_dir(out: Path) -> Path:
    return out / "partitions"


def preprocess(cfg: RunConfig) -> dict:
    """Run the preprocessing pipeline; returns the manifest dict."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    mesh = load_mesh(cfg.mesh, cfg.materials)
    geom = compute_geometry(mesh)
    ts = cfl_timesteps(geom, mesh.materials, cfg.order, cfg.cfl)
    if cfg.lambda_mode == "optimize":
        lam, clustering, speedup = optimize_lambda(ts, mesh.neighbor, cfg.nc)
    else:
        clustering = normalize_clusters(
            assign_clusters(ts, cfg.nc, cfg.lam), mesh.neighbor
        )
        lam, speedup = cfg.lam, theoretical_speedup(clustering)
    raw = assign_clusters(ts, cfg.nc, lam)
    moved = int(np.sum(raw.cluster != clustering.cluster))
    speedup_raw = theoretical_speedup(raw)
    nf = cfg.order * (cfg.order + 1) // 2
    graph = pc.build_dual_graph(mesh, clustering, nf)
    part = pc.partition(graph, cfg.partitions)
    bundles = pc.build_partition_bundles(mesh, geom, clustering, part, nf)
    pdir = _partition_dir(out)
    pdir.mkdir(exist_ok=True)
    files = []
    for b in bundles:
        path = pdir / f"part_{b.partition:04d}.tdgp"
        pc.write_partition_file(path, b, order=cfg.order, mechanisms=cfg.mechanisms)
        files.append(str(path.relative_to(out)))
    write_clustering_report(out / "clustering_report.csv", clustering, ts)
    pc.write_partition_report(out / "partition_report.csv", part, clustering)
    manifest = {
        "config": {
            k: getattr(cfg, k)
            for k in (
                "order",
                "precision",
                "mechanisms",
                "center_freq",
                "nc",
                "lam",
                "partitions",
                "width",
                "t_end",
                "cfl",
            )
        },
        "lambda": lam,
        "dt_min": ts.dt_min,
        "theoretical_speedup": speedup,
        "normalization_moved_elements": moved,
        "normalization_speedup_loss": 1.0 - speedup / speedup_raw,
        "num_elements": mesh.num_elements,
        "cluster_counts": clustering.counts.tolist(),
        "partition_files": files,
        "reports": ["clustering_report.csv", "partition_report.csv"],
    }
    manifest["config"]["lam"] = lam
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class _BundleGeometry:
    """Just enough geometry for point location inside one partition."""

    def __init__(self, verts: np.ndarray):
        self.elem_verts = verts
        self.volume = (
            np.abs(np.linalg.det(np.transpose(verts[:, 1:] - verts[:, :1], (0, 2, 1))))
            / 6.0
        )


def _build_series(spec: dict, width: int) -> SampledSeries:
    if "values" in spec:
        if "dt" not in spec:
            raise ConfigError("sampled source series needs an explicit dt")
        vals = np.asarray(spec["values"], dtype=float)
    elif spec.get("kind") == "ricker":
        f0 = spec["f0"]
        dt = spec.get("dt", 1.0 / (40.0 * f0))
        dur = spec.get("duration", 2.4 / f0)
        delay = spec.get("delay", 1.2 / f0)
        t = np.arange(int(np.ceil(dur / dt)) + 1) * dt
        a = (np.pi * f0 * (t - delay)) ** 2
        vals = (1.0 - 2.0 * a) * np.exp(-a)
    else:
        raise ConfigError(f"unsupported source series spec {spec}")
    scale = np.atleast_1d(np.asarray(spec.get("scale", 1.0), dtype=float))
    if scale.size not in (1, width):
        raise ConfigError("source scale must be scalar or one value per fused slot")
    if scale.size == 1:
        scale = np.repeat(scale, width)
    return SampledSeries(
        t0=spec.get("t0", 0.0), dt=spec.get("dt", 1.0), values=vals[:, None] * scale
    )


def _locate_global(bundles, point):
    """(bundle index, local element) of the owning element.

    Ties at shared faces/vertices resolve to the smallest global element id,
    which makes the choice independent of the partition count.
    """
    point = np.asarray(point, dtype=float)
    matches = []
    for bi, b in enumerate(bundles):
        for k in range(b.n_local):
            v = b.verts[k]
            xi = np.linalg.solve((v[1:] - v[0]).T, point - v[0])
            if np.all(xi >= -1e-9) and xi.sum() <= 1 + 1e-9:
                matches.append((int(b.global_ids[k]), bi, k))
    if not matches:
        raise ConfigError(f"point {point.tolist()} lies outside the mesh")
    matches.sort()
    _, bi, k = matches[0]
    return bi, k


def run(cfg: RunConfig) -> dict:
    """Execute a prepared run; returns the summary dict."""
    out = Path(cfg.output)
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    for key in ("order", "mechanisms", "width", "precision"):
        if manifest["config"][key] != getattr(cfg, key):
            raise VersionError(
                f"config/file mismatch for {key}: preprocess had "
                f"{manifest['config'][key]}, run asked {getattr(cfg, key)}"
            )
    bundles = [
        pc.read_partition_file(out / rel, expect_order=cfg.order,
                               expect_mechanisms=cfg.mechanisms)
        for rel in manifest["partition_files"]
    ]
    relax = _relaxation(cfg)
    mats = assemble_reference_matrices(cfg.order)
    n_samples = int(np.floor(cfg.t_end / cfg.receiver_dt + 1e-9)) + 1

    sources_by_bundle = {b.partition: [] for b in bundles}
    for spec in cfg.sources:
        bi, k = _locate_global(bundles, spec["location"])
        series = _build_series(spec["series"], cfg.width)
        src = PointSource(
            location=np.asarray(spec["location"], float),
            moment=np.asarray(spec["moment"], float),
            rate=series,
        )
        geom = _BundleGeometry(bundles[bi].verts)
        term = project_source(src, geom, mats.tet_basis, 9 + 6 * cfg.mechanisms, elem=k)
        sources_by_bundle[bundles[bi].partition].append(term)

    receivers_by_bundle = {b.partition: [] for b in bundles}
    all_receivers = []
    for ri, point in enumerate(cfg.receivers):
        bi, k = _locate_global(bundles, point)
        geom = _BundleGeometry(bundles[bi].verts)
        v = bundles[bi].verts[k]
        xi = np.linalg.solve((v[1:] - v[0]).T, np.asarray(point, float) - v[0])
        phi = mats.tet_basis.eval(xi[None, :])[0]
        rec = Receiver(point, k, phi, cfg.receiver_dt, n_samples, cfg.width)
        receivers_by_bundle[bundles[bi].partition].append(rec)
        all_receivers.append((ri, rec))

    transport = pc.LoopbackTransport(len(bundles), mats.info.nb2d, cfg.width)
    workers = [
        pc.make_worker(
            b,
            mats,
            relax,
            cfg.t_end,
            width=cfg.width,
            dtype=cfg.dtype,
            transport=transport,
            sources=sources_by_bundle[b.partition],
            receivers=receivers_by_bundle[b.partition],
        )
        for b in bundles
    ]
    for w in workers:
        for rec in w.receivers:
            rec.record_state(w.dofs[rec.elem], 0.0)
    t_wall = time.perf_counter()
    pc.run_partitioned(workers, transport)
    t_wall = time.perf_counter() - t_wall

    rec_dir = out / "receivers"
    rec_dir.mkdir(exist_ok=True)
    outputs = []
    for ri, rec in all_receivers:
        for s in range(cfg.width):
            path = rec_dir / f"rec_{ri:03d}_s{s:02d}.csv"
            write_seismogram_csv(path, rec, slot=s)
            outputs.append(str(path.relative_to(out)))

    dt_min = manifest["dt_min"]
    gts_steps = int(np.ceil(cfg.t_end / dt_min - 1e-9))
    updates_lts = sum(w.update_count for w in workers)
    updates_gts = manifest["num_elements"] * gts_steps
    step_counts: dict[int, int] = {}
    for w in workers:
        for level, nsteps in w.step_counts.items():
            step_counts[level] = max(step_counts.get(level, 0), nsteps)
    summary = {
        "element_updates_lts": updates_lts,
        "element_updates_gts_equivalent": updates_gts,
        "realized_speedup": updates_gts / updates_lts,
        "theoretical_speedup": manifest["theoretical_speedup"],
        "wall_time_s": t_wall,
        "seconds_per_element_update": t_wall / updates_lts,
        "per_cluster_steps": {str(k): v for k, v in sorted(step_counts.items())},
        "messages_sent": transport.sent,
        "receiver_files": outputs,
        "precision": cfg.precision,
        "width": cfg.width,
    }
    if cfg.mechanisms > 0:
        summary["anelastic_cost_ratio"] = _anelastic_cost_ratio(cfg, mats)
    with open(out / "run_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.setdefault("outputs", [])
    manifest["outputs"] = sorted(set(manifest.get("outputs", [])) | set(outputs) | {"run_summary.json"})
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _anelastic_cost_ratio(cfg: RunConfig, mats, probe_steps: int = 3) -> float:
    """Wall time per element update, anelastic over elastic, on a short probe."""
    mesh = load_mesh(cfg.mesh, cfg.materials)
    geom = compute_geometry(mesh)
    ts = cfl_timesteps(geom, mesh.materials, cfg.order, cfg.cfl)
    times = {}
    for label, relax in (("elastic", RelaxationSet()), ("anelastic", _relaxation(cfg))):
        ops = build_element_operators(
            geom.elem_verts, mesh.materials, mesh.neighbor, mesh.boundary, relax
        )
        ctx = KernelContext.create(mats, ops, width=cfg.width, dtype=cfg.dtype)
        t0 = time.perf_counter()
        run_gts(mesh, ctx, mats, ts.dt_min, probe_steps * ts.dt_min)
        times[label] = time.perf_counter() - t0
    return times["anelastic"] / times["elastic"]


def report(run_dir, reference_dir, out_path) -> list:
    """Misfit of every seismogram in run_dir against its reference twin."""
    run_dir, reference_dir = Path(run_dir), Path(reference_dir)
    for d in (run_dir, reference_dir):
        if not (d / "receivers").is_dir():
            raise FileNotFoundError(f"{d}: no receivers/ directory (not a run output?)")
    entries = []
    for path in sorted((run_dir / "receivers").glob("rec_*.csv")):
        ref_path = reference_dir / "receivers" / path.name
        if not ref_path.exists():
            continue
        s = read_seismogram_csv(path)
        r = read_seismogram_csv(ref_path)
        e = misfit(s, r)
        for ch, name in enumerate("uvw"):
            entries.append((path.stem, name, float(e[ch])))
    write_misfit_csv(out_path, entries)
    return entries
