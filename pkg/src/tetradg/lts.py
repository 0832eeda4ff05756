"""Rate-2 clustered local time stepping.

CFL timesteps, cluster assignment with the interval-scaling parameter
``lam`` in (0.5, 1], neighbor normalization, the exchange-buffer algebra
(B1/B2/B3), and the dependency-respecting scheduler.

Scheduling bookkeeping runs on integer half-ticks of the base step
(``u2 = lam * dt_min / 2``): every cluster-step boundary is an exact
multiple, so interval comparisons are integer comparisons and the float
time of a tick is reproduced identically by every cluster (single
multiplication, never accumulation).  The final step of each cluster is
clamped to ``t_end``; buffers stay consistent because B1 integrates the
clamped step while B2 always integrates the unclamped half, so B1 - B2 is
the clamped second half and reads resolve by interval identity.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .basis import ReferenceMatrices
from .equations import N_ELASTIC
from .kernels import (
    KernelContext,
    ck_derivatives,
    surface_local,
    surface_neighbor,
    taylor_window,
    update,
    volume_kernel,
)


class SchedulingError(RuntimeError):
    pass


class ProtocolError(SchedulingError):
    """Missing, duplicate, or mismatched cross-partition payloads."""


# ---------------------------------------------------------------------------
# timesteps and clustering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimestepSet:
    dt: np.ndarray  # (K,)

    @property
    def dt_min(self) -> float:
        return float(self.dt.min())


def cfl_timesteps(geom, materials, order: int, cfl: float = 0.9) -> TimestepSet:
    """dt_k = cfl * insphere_diameter / ((2 O - 1) * vp)."""
    vp = np.array([m.vp for m in materials])
    return TimestepSet(dt=cfl * geom.insphere / ((2 * order - 1) * vp))


@dataclass
class Clustering:
    nc: int
    lam: float
    dt_min: float
    cluster: np.ndarray  # (K,) ids in 1..nc

    def cluster_dt(self, level: int) -> float:
        return 2 ** (level - 1) * self.lam * self.dt_min

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.nc + 1)[1:]


def assign_clusters(ts: TimestepSet, nc: int, lam: float) -> Clustering:
    """Pre-normalization assignment: dt in [2^(l-1), 2^l) * lam * dt_min -> C_l."""
    if not (0.5 < lam <= 1.0):
        raise ValueError(f"lambda must be in (0.5, 1], got {lam}")
    if nc < 1:
        raise ValueError("nc >= 1 required")
    ratio = ts.dt / (lam * ts.dt_min)
    levels = np.clip(np.floor(np.log2(ratio)).astype(int) + 1, 1, nc)
    return Clustering(nc=nc, lam=lam, dt_min=ts.dt_min, cluster=levels)


def normalize_clusters(clustering: Clustering, neighbor: np.ndarray) -> Clustering:
    """Lower cluster ids until face neighbors differ by at most one level.

    Monotone lowering converges to the greatest fixed point below the input,
    independent of sweep order.
    """
    levels = clustering.cluster.copy()
    changed = True
    while changed:
        changed = False
        for k in range(levels.size):
            for kn in neighbor[k]:
                if kn >= 0 and levels[k] > levels[kn] + 1:
                    levels[k] = levels[kn] + 1
                    changed = True
    return Clustering(clustering.nc, clustering.lam, clustering.dt_min, levels)


def theoretical_speedup(clustering: Clustering) -> float:
    """Element-update ratio GTS/LTS per unit simulated time: K*lam / sum 2^(1-l)."""
    levels = clustering.cluster
    return levels.size * clustering.lam / np.sum(2.0 ** (1 - levels))


def optimize_lambda(ts: TimestepSet, neighbor: np.ndarray, nc: int):
    """Scan lam in {0.51, ..., 1.00}; ties break toward larger lam."""
    best = None
    for i in range(50):
        lam = round(0.51 + 0.01 * i, 2)
        clustering = normalize_clusters(assign_clusters(ts, nc, lam), neighbor)
        s = theoretical_speedup(clustering)
        if best is None or s >= best[2]:
            best = (lam, clustering, s)
    return best


def write_clustering_report(path, clustering: Clustering, ts: TimestepSet,
                            hist_bins: int = 40) -> None:
    """Per-cluster counts and bounds plus the lambda / speedup annotation data.

    A trailing histogram section (log-spaced bins of the element timestep
    distribution, relative to dt_min) feeds the density curve of the
    post-processing figures.
    """
    counts = clustering.counts
    with open(path, "w") as fh:
        fh.write("# lambda,%.2f\n" % clustering.lam)
        fh.write("# dt_min,%.17e\n" % ts.dt_min)
        fh.write("# dt_max,%.17e\n" % ts.dt.max())
        fh.write("# theoretical_speedup,%.6f\n" % theoretical_speedup(clustering))
        fh.write("cluster,count,dt_lower,dt_upper\n")
        for l in range(1, clustering.nc + 1):
            upper = (
                np.inf if l == clustering.nc else 2**l * clustering.lam * ts.dt_min
            )
            fh.write(f"{l},{counts[l - 1]},{clustering.cluster_dt(l):.17e},{upper:.17e}\n")
        edges = np.geomspace(ts.dt_min, max(ts.dt.max(), ts.dt_min * (1 + 1e-9)),
                             hist_bins + 1)
        edges[0] *= 1 - 1e-12
        edges[-1] *= 1 + 1e-12
        hist, _ = np.histogram(ts.dt, bins=edges)
        fh.write("histogram\nbin_lower,bin_upper,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], hist):
            fh.write(f"{lo:.17e},{hi:.17e},{c}\n")


# ---------------------------------------------------------------------------
# exchange buffers
# ---------------------------------------------------------------------------

REL_EQUAL = 0
REL_NEIGHBOR_FINER = 1  # the buffer reader steps twice while the owner steps once
REL_NEIGHBOR_COARSER = 2


@dataclass
class ExchangeBuffers:
    """Per-element stores of time-integrated elastic data for neighbors."""

    b1: np.ndarray  # (n, 9, B, W)
    b2: np.ndarray
    b3: np.ndarray
    has_smaller: np.ndarray  # (n,) bool: some face neighbor steps at half
    has_larger: np.ndarray  # (n,) bool: some face neighbor steps at double

    @classmethod
    def allocate(cls, n, nb, width, dtype, has_smaller, has_larger):
        shape = (n, N_ELASTIC, nb, width)
        return cls(
            b1=np.zeros(shape, dtype=dtype),
            b2=np.zeros(shape, dtype=dtype),
            b3=np.zeros(shape, dtype=dtype),
            has_smaller=np.asarray(has_smaller, bool),
            has_larger=np.asarray(has_larger, bool),
        )


def update_buffers(
    bufs: ExchangeBuffers,
    derivs: np.ndarray,
    order: int,
    dt_eff: float,
    dt_half: float,
    n_step: int,
    idx: np.ndarray,
) -> None:
    """Refresh B1/B2/B3 of elements ``idx`` from freshly computed derivatives.

    B1 = T^e(t, dt_eff); B2 = T^e(t, dt_half) where flagged; B3 resets to B1
    on even step parity and accumulates B1 on odd parity, realizing the
    double-interval integral.
    """
    de = derivs[:, :, :N_ELASTIC]
    b1 = taylor_window(de, 0.0, dt_eff, order)
    bufs.b1[idx] = b1
    smaller = idx[bufs.has_smaller[idx]]
    if smaller.size:
        sel = bufs.has_smaller[idx]
        bufs.b2[smaller] = taylor_window(de[sel], 0.0, dt_half, order)
    larger = bufs.has_larger[idx]
    if larger.any():
        if n_step % 2 == 0:
            bufs.b3[idx[larger]] = b1[larger]
        else:
            bufs.b3[idx[larger]] += b1[larger]


def neighbor_contribution(
    bufs: ExchangeBuffers,
    owner: np.ndarray,
    relation: int,
    substep_parity: int = 0,
    b3_complete: bool = True,
) -> np.ndarray:
    """Time-integrated elastic data an element reads from a neighbor's buffers.

    relation is the reader's step relative to the buffer owner: equal-step
    readers take B1, smaller-step readers take B2 then B1 - B2 on their two
    substeps, larger-step readers take the completed B3.
    """
    if relation == REL_EQUAL:
        return bufs.b1[owner]
    if relation == REL_NEIGHBOR_COARSER:
        # reader is the smaller-step side of the owner
        return bufs.b2[owner] if substep_parity == 0 else bufs.b1[owner] - bufs.b2[owner]
    if relation == REL_NEIGHBOR_FINER:
        if not b3_complete:
            raise SchedulingError("reading an incomplete B3 buffer")
        return bufs.b3[owner]
    raise ValueError(f"unknown relation {relation}")


# ---------------------------------------------------------------------------
# the cluster scheduler
# ---------------------------------------------------------------------------


@dataclass
class SendRule:
    """One cross-partition payload stream: sender element/face toward a ghost."""

    elem: int  # local sender element
    face: int  # sender's local face index (the j the receiver's row names)
    orient_recv: int  # h as recorded by the receiver
    relation: int  # receiver's step relative to the sender (REL_*)
    dest_partition: int
    dest_fifo: int


@dataclass
class _ClusterState:
    level: int
    elems: np.ndarray  # local element indices, ascending
    step_ticks: int
    t_ticks: int = 0
    n_step: int = 0
    predicted: bool = False
    pred_start: int = 0
    pred_end: int = 0
    b3_start: int = 0
    b3_end: int = 0
    b3_complete: bool = False
    has_finer: bool = False
    has_coarser: bool = False
    face_groups: dict = field(default_factory=dict)
    ghost_faces: list = field(default_factory=list)
    send_rules: list = field(default_factory=list)


class DomainWorker:
    """Scheduler and state for one partition's elements.

    Eligibility rules serialize the concurrent schedule: a cluster may
    predict once every locally adjacent consumer of its live buffers has
    caught up (finer clusters always; coarser ones when the step parity is
    about to reset B3), and may correct once every neighbor buffer covers its
    step interval and every cross-partition payload has arrived.
    """

    def __init__(
        self,
        ctx: KernelContext,
        mats: ReferenceMatrices,
        cluster_levels: np.ndarray,
        lam: float,
        dt_min: float,
        t_end: float,
        neighbor: np.ndarray,
        neighbor_face: np.ndarray,
        neighbor_orient: np.ndarray,
        ghost_fifo: np.ndarray | None = None,
        ghost_relation: np.ndarray | None = None,
        send_rules: list[SendRule] | None = None,
        transport=None,
        partition: int = 0,
        sources: list | None = None,
        receivers: list | None = None,
        record_actions: bool = False,
    ):
        self.ctx = ctx
        self.mats = mats
        self.partition = partition
        self.transport = transport
        self.sources = sources or []
        self.receivers = receivers or []
        n = cluster_levels.size
        self.n_local = n
        self.levels = np.asarray(cluster_levels, int)
        self.lam = lam
        self.dt_min = dt_min
        self.u2 = lam * dt_min / 2.0
        self.t_end = t_end
        self.m_end = int(np.ceil(t_end / self.u2 - 1e-9))
        self.neighbor = neighbor
        self.neighbor_face = neighbor_face
        self.neighbor_orient = neighbor_orient
        self.ghost_fifo = ghost_fifo if ghost_fifo is not None else np.full((n, 4), -1)
        self.ghost_relation = (
            ghost_relation if ghost_relation is not None else np.zeros((n, 4), int)
        )
        self.dofs = ctx.zero_state(n)
        self.derivs = np.zeros(
            (n, ctx.order, ctx.nq, ctx.nb, ctx.width), dtype=ctx.dtype
        )
        self.tint = ctx.zero_state(n)
        # B2 serves smaller-step neighbors, B3 larger-step ones; sender-side
        # flags for cross-partition consumers come from the send rules.
        self.buffers = ExchangeBuffers.allocate(
            n, ctx.nb, ctx.width, ctx.dtype,
            has_smaller=np.zeros(n, bool), has_larger=np.zeros(n, bool),
        )
        for k in range(n):
            for i in range(4):
                kn = neighbor[k, i]
                if kn >= 0:
                    d = self.levels[kn] - self.levels[k]
                    if d == 1:
                        self.buffers.has_smaller[kn] = True
                    if d == -1:
                        self.buffers.has_larger[kn] = True
        for rule in send_rules or []:
            if rule.relation == REL_NEIGHBOR_COARSER:
                self.buffers.has_smaller[rule.elem] = True
            if rule.relation == REL_NEIGHBOR_FINER:
                self.buffers.has_larger[rule.elem] = True
        self.mailboxes: dict[int, deque] = {}
        for k in range(n):
            for i in range(4):
                if self.ghost_fifo[k, i] >= 0:
                    self.mailboxes[int(self.ghost_fifo[k, i])] = deque()
        self.clusters: dict[int, _ClusterState] = {}
        for level in sorted(set(self.levels.tolist())):
            elems = np.nonzero(self.levels == level)[0]
            cs = _ClusterState(level=level, elems=elems, step_ticks=2**level)
            self.clusters[level] = cs
        self._pos_in_cluster = np.zeros(n, int)
        for cs in self.clusters.values():
            self._pos_in_cluster[cs.elems] = np.arange(cs.elems.size)
            self._build_face_plan(cs)
        for rule in send_rules or []:
            self.clusters[self.levels[rule.elem]].send_rules.append(rule)
        for cs in self.clusters.values():
            cs.has_finer = any(
                self.levels[self.neighbor[k, i]] == cs.level - 1
                for k in cs.elems
                for i in range(4)
                if self.neighbor[k, i] >= 0
            )
            cs.has_coarser = any(
                self.levels[self.neighbor[k, i]] == cs.level + 1
                for k in cs.elems
                for i in range(4)
                if self.neighbor[k, i] >= 0
            )
        self.update_count = 0
        self.step_counts = {level: 0 for level in self.clusters}
        self.actions: list[tuple] | None = [] if record_actions else None
        self.on_predict = None  # optional test hooks: f(worker, cluster_state)
        self.on_correct = None

    # -- construction helpers ------------------------------------------------

    def _build_face_plan(self, cs: _ClusterState) -> None:
        groups: dict[tuple, list] = {}
        for pos, k in enumerate(cs.elems):
            for i in range(4):
                kn = self.neighbor[k, i]
                if kn >= 0:
                    j = self.neighbor_face[k, i]
                    h = self.neighbor_orient[k, i]
                    d = self.levels[kn] - self.levels[k]
                    rel = {0: REL_EQUAL, -1: REL_NEIGHBOR_FINER, 1: REL_NEIGHBOR_COARSER}[d]
                    groups.setdefault((j, h, rel), []).append((pos, i, kn))
                elif self.ghost_fifo[k, i] >= 0:
                    cs.ghost_faces.append((pos, i, int(self.ghost_fifo[k, i])))
        cs.face_groups = {
            key: tuple(np.array(cols) for cols in zip(*vals))
            for key, vals in groups.items()
        }

    # -- time helpers ----------------------------------------------------------

    def tick_time(self, ticks: int) -> float:
        return min(ticks * self.u2, self.t_end)

    # -- scheduling ------------------------------------------------------------

    def done(self) -> bool:
        return all(cs.t_ticks >= self.m_end for cs in self.clusters.values())

    def _can_predict(self, cs: _ClusterState) -> bool:
        if cs.predicted or cs.t_ticks >= self.m_end:
            return False
        if cs.has_finer and self.clusters[cs.level - 1].t_ticks < cs.t_ticks:
            return False
        if (
            cs.has_coarser
            and cs.n_step % 2 == 0
            and cs.n_step > 0
            and self.clusters[cs.level + 1].t_ticks < cs.t_ticks
        ):
            return False
        return True

    def _can_correct(self, cs: _ClusterState) -> bool:
        if not cs.predicted:
            return False
        t0, t1 = cs.pred_start, cs.pred_end
        if cs.has_coarser:
            # buffers of the coarser cluster stay valid after its correction,
            # until its next prediction overwrites them
            coarse = self.clusters[cs.level + 1]
            if not (coarse.pred_start <= t0 and coarse.pred_end >= t1):
                return False
        if cs.has_finer:
            fine = self.clusters[cs.level - 1]
            if not (fine.b3_complete and fine.b3_start == t0 and fine.b3_end == t1):
                return False
        for _, _, fifo in cs.ghost_faces:
            if not self.mailboxes[fifo]:
                return False
        return True

    def poll_transport(self) -> None:
        if self.transport is None:
            return
        for fifo, header, payload in self.transport.poll(self.partition):
            if fifo not in self.mailboxes:
                raise ProtocolError(f"payload for unknown face fifo {fifo}")
            self.mailboxes[fifo].append((header, payload))

    def try_advance(self) -> bool:
        """Run every currently eligible action; returns True if any ran."""
        self.poll_transport()
        progressed = False
        while True:
            candidates = sorted(
                (cs.t_ticks, cs.level)
                for cs in self.clusters.values()
                if (self._can_correct(cs) if cs.predicted else self._can_predict(cs))
            )
            if not candidates:
                return progressed
            cs = self.clusters[candidates[0][1]]
            if cs.predicted:
                self._correct(cs)
            else:
                self._predict(cs)
            progressed = True
            self.poll_transport()

    def run_to_completion(self) -> None:
        """Single-partition drive loop; raises on scheduling deadlock."""
        self._initial_predictions()
        while not self.done():
            if not self.try_advance():
                state = {cs.level: (cs.t_ticks, cs.predicted) for cs in self.clusters.values()}
                raise SchedulingError(f"scheduler deadlock; cluster state {state}")

    def _initial_predictions(self) -> None:
        for level in sorted(self.clusters):
            cs = self.clusters[level]
            if not cs.predicted and cs.t_ticks < self.m_end:
                self._predict(cs)

    # -- actions ----------------------------------------------------------------

    def _predict(self, cs: _ClusterState) -> None:
        t0 = cs.t_ticks
        t1 = min(t0 + cs.step_ticks, self.m_end)
        dt_eff = self.tick_time(t1) - self.tick_time(t0)
        dt_half = self.tick_time(min(t0 + cs.step_ticks // 2, self.m_end)) - self.tick_time(t0)
        idx = cs.elems
        self.derivs[idx] = ck_derivatives(self.dofs, self.ctx, idx=idx)
        self.tint[idx] = taylor_window(self.derivs[idx], 0.0, dt_eff, self.ctx.order)
        update_buffers(
            self.buffers, self.derivs[idx], self.ctx.order, dt_eff, dt_half,
            cs.n_step, idx,
        )
        if cs.n_step % 2 == 0:
            cs.b3_start, cs.b3_end = t0, t1
        else:
            cs.b3_end = t1
        cs.b3_complete = cs.n_step % 2 == 1 or t1 == self.m_end
        cs.predicted = True
        cs.pred_start, cs.pred_end = t0, t1
        self._emit_sends(cs)
        if self.actions is not None:
            self.actions.append(("predict", cs.level, t0))
        if self.on_predict is not None:
            self.on_predict(self, cs)

    def _emit_sends(self, cs: _ClusterState) -> None:
        if self.transport is None:
            if cs.send_rules:
                raise SchedulingError("send rules configured without a transport")
            return
        t0, t1 = cs.pred_start, cs.pred_end
        half = t0 + cs.step_ticks // 2
        for rule in cs.send_rules:
            fbar = self._fbar(rule.face, rule.orient_recv)
            k = rule.elem
            if rule.relation == REL_EQUAL:
                self._send(rule, (t0, t1), np.einsum("vbw,bf->vfw", self.buffers.b1[k], fbar))
            elif rule.relation == REL_NEIGHBOR_COARSER:
                # receiver is finer: one payload per receiver substep
                if t1 <= half:
                    self._send(rule, (t0, t1), np.einsum("vbw,bf->vfw", self.buffers.b1[k], fbar))
                else:
                    self._send(rule, (t0, half), np.einsum("vbw,bf->vfw", self.buffers.b2[k], fbar))
                    self._send(
                        rule,
                        (half, t1),
                        np.einsum(
                            "vbw,bf->vfw", self.buffers.b1[k] - self.buffers.b2[k], fbar
                        ),
                    )
            elif rule.relation == REL_NEIGHBOR_FINER:
                # receiver is coarser: completed two-substep accumulation only
                if cs.b3_complete:
                    self._send(
                        rule,
                        (cs.b3_start, cs.b3_end),
                        np.einsum("vbw,bf->vfw", self.buffers.b3[k], fbar),
                    )

    def _send(self, rule: SendRule, interval: tuple, payload: np.ndarray) -> None:
        self.transport.send(rule.dest_partition, rule.dest_fifo, interval, payload)

    def _fbar(self, j: int, h: int) -> np.ndarray:
        return self.mats.fbar(j, h).astype(self.ctx.dtype)

    def _correct(self, cs: _ClusterState) -> None:
        t0, t1 = cs.pred_start, cs.pred_end
        idx = cs.elems
        payloads = np.zeros(
            (idx.size, 4, N_ELASTIC, self.ctx.nf, self.ctx.width), dtype=self.ctx.dtype
        )
        for (j, h, rel), (pos, face_i, nbr) in cs.face_groups.items():
            if rel == REL_EQUAL:
                data = self.buffers.b1[nbr]
            elif rel == REL_NEIGHBOR_FINER:
                fine = self.clusters[cs.level - 1]
                if not (fine.b3_complete and fine.b3_start == t0 and fine.b3_end == t1):
                    raise SchedulingError("incomplete B3 read")
                data = self.buffers.b3[nbr]
            else:
                coarse = self.clusters[cs.level + 1]
                if (coarse.pred_start, coarse.pred_end) == (t0, t1):
                    data = self.buffers.b1[nbr]
                elif coarse.pred_start == t0:
                    data = self.buffers.b2[nbr]
                elif t0 == coarse.pred_start + coarse.step_ticks // 2:
                    data = self.buffers.b1[nbr] - self.buffers.b2[nbr]
                else:
                    raise SchedulingError(
                        f"no buffer covers [{t0},{t1}] from coarser cluster"
                    )
            prod = np.einsum("nvbw,bf->nvfw", data, self._fbar(j, h))
            payloads[pos, face_i] = prod
        for pos, face_i, fifo in cs.ghost_faces:
            if not self.mailboxes[fifo]:
                raise ProtocolError(f"missing payload on face fifo {fifo}")
            header, payload = self.mailboxes[fifo].popleft()
            if header != (t0, t1):
                raise ProtocolError(
                    f"payload interval mismatch on fifo {fifo}: got {header}, need {(t0, t1)}"
                )
            payloads[pos, face_i] = payload
        contrib = volume_kernel(self.tint[idx], self.ctx, idx=idx)
        sl, _ = surface_local(self.tint[idx], self.ctx, idx=idx)
        sn = surface_neighbor(payloads, self.ctx, idx=idx)
        self.dofs[idx] = update(self.dofs[idx], contrib, sl, sn)
        real_t0, real_t1 = self.tick_time(t0), self.tick_time(t1)
        for src in self.sources:
            if self.levels[src.elem] == cs.level:
                self.dofs[src.elem] += src.integral(real_t0, real_t1).astype(self.ctx.dtype)
        for rec in self.receivers:
            if self.levels[rec.elem] == cs.level:
                rec.record(self.derivs[rec.elem], real_t0, real_t1)
        cs.t_ticks = t1
        cs.n_step += 1
        cs.predicted = False
        self.update_count += idx.size
        self.step_counts[cs.level] += 1
        if self.actions is not None:
            self.actions.append(("correct", cs.level, t0))
        if self.on_correct is not None:
            self.on_correct(self, cs)


def run_schedule(
    mesh,
    ctx: KernelContext,
    mats: ReferenceMatrices,
    clustering: Clustering,
    t_end: float,
    dofs0: np.ndarray | None = None,
    sources=None,
    receivers=None,
    record_actions: bool = False,
) -> DomainWorker:
    """Drive a single-domain clustered run to t_end; returns the worker."""
    worker = DomainWorker(
        ctx,
        mats,
        clustering.cluster,
        clustering.lam,
        clustering.dt_min,
        t_end,
        mesh.neighbor,
        mesh.neighbor_face,
        mesh.neighbor_orient,
        sources=sources,
        receivers=receivers,
        record_actions=record_actions,
    )
    if dofs0 is not None:
        worker.dofs[:] = dofs0
    worker.run_to_completion()
    return worker


def run_gts(
    mesh,
    ctx: KernelContext,
    mats: ReferenceMatrices,
    dt: float,
    t_end: float,
    dofs0: np.ndarray | None = None,
    sources=None,
    receivers=None,
):
    """Reference lockstep loop: every element advances at the global step.

    Kept independent of the cluster scheduler so the two can check each other.
    Returns (dofs, n_steps).
    """
    K = mesh.num_elements
    dofs = ctx.zero_state(K) if dofs0 is None else dofs0.copy()
    fbar_cache = {
        (j, h): mats.fbar(j, h).astype(ctx.dtype) for j in range(4) for h in (1, 2, 3)
    }
    n_steps = int(np.ceil(t_end / dt - 1e-9))
    t = 0.0
    for step in range(n_steps):
        dt_eff = min(dt, t_end - t)
        derivs = ck_derivatives(dofs, ctx)
        tint = taylor_window(derivs, 0.0, dt_eff, ctx.order)
        te = tint[:, :N_ELASTIC]
        payloads = np.zeros((K, 4, N_ELASTIC, ctx.nf, ctx.width), dtype=ctx.dtype)
        for k in range(K):
            for i in range(4):
                kn = mesh.neighbor[k, i]
                if kn < 0:
                    continue
                payloads[k, i] = np.einsum(
                    "vbw,bf->vfw",
                    te[kn],
                    fbar_cache[(mesh.neighbor_face[k, i], mesh.neighbor_orient[k, i])],
                )
        contrib = volume_kernel(tint, ctx)
        sl, _ = surface_local(tint, ctx)
        sn = surface_neighbor(payloads, ctx)
        update(dofs, contrib, sl, sn)
        for src in sources or []:
            dofs[src.elem] += src.integral(t, t + dt_eff).astype(ctx.dtype)
        for rec in receivers or []:
            rec.record(derivs[rec.elem], t, t + dt_eff)
        t += dt_eff
    return dofs, n_steps
