"""Weighted dual-graph partitioning, reordering, and compressed exchange.

The dual graph carries element weights 2^(Nc - l) (cluster C_l steps
2^(l-1) times less often than C_1) and face weights proportional to the
exchange frequency of the finer side times the per-message payload size
9*F.  Partitioning is a greedy BFS growth from peripheral seeds with a
weighted balance refinement pass; an external partitioner can be hooked in
through the same (weights -> part ids) signature.

Cross-partition faces exchange face-local payloads of exactly 9*F*W
working-precision values plus a fixed header (face stream id and the
covered interval in scheduler ticks).  Payload streams are FIFO per face
and direction, which makes delivery order match consumption order.  The
reference transport is in-process queues; anything with the same
``send``/``poll`` surface can replace it.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .equations import BND_INTERIOR, Material
from .lts import (
    REL_EQUAL,
    REL_NEIGHBOR_COARSER,
    REL_NEIGHBOR_FINER,
    Clustering,
    ProtocolError,
    SendRule,
)

ROLE_INTERIOR = 0
ROLE_SEND = 1


class PartitionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dual graph and partitioning
# ---------------------------------------------------------------------------


@dataclass
class DualGraph:
    vertex_weight: np.ndarray  # (K,)
    edges: np.ndarray  # (E, 2) element pairs, a < b
    edge_weight: np.ndarray  # (E,)
    adjacency: list  # per vertex: list of (other, edge weight)


def build_dual_graph(mesh, clustering: Clustering, nf: int) -> DualGraph:
    levels = clustering.cluster
    nc = clustering.nc
    vw = 2.0 ** (nc - levels)
    edges, ew = [], []
    for k in range(mesh.num_elements):
        for i in range(4):
            kn = mesh.neighbor[k, i]
            if kn > k:
                edges.append((k, kn))
                ew.append(2.0 ** (nc - min(levels[k], levels[kn])) * 9 * nf)
    edges = np.array(edges, dtype=int) if edges else np.zeros((0, 2), int)
    ew = np.array(ew)
    adjacency = [[] for _ in range(mesh.num_elements)]
    for (a, b), w in zip(edges, ew):
        adjacency[a].append((int(b), float(w)))
        adjacency[b].append((int(a), float(w)))
    return DualGraph(vw, edges, ew, adjacency)


def partition(graph: DualGraph, p: int, external=None) -> np.ndarray:
    """Greedy BFS growth from peripheral seeds plus weighted balance refinement.

    ``external`` hooks in another graph partitioner: any callable
    (graph, p) -> per-element partition ids; its output is validated and
    returned unchanged.
    """
    K = graph.vertex_weight.size
    if p < 1:
        raise PartitionError("p >= 1 required")
    if p > K:
        raise PartitionError(f"cannot cut {K} elements into {p} partitions")
    if external is not None:
        part = np.asarray(external(graph, p), dtype=int)
        if part.shape != (K,) or part.min() < 0 or part.max() >= p:
            raise PartitionError("external partitioner returned invalid ids")
        return part
    if p == 1:
        return np.zeros(K, dtype=int)
    part = np.full(K, -1, dtype=int)
    target = graph.vertex_weight.sum() / p
    for pid in range(p - 1):
        seed = _peripheral_seed(graph, part)
        load = 0.0
        frontier = {seed: 0.0}
        while frontier:
            # best gain: most edge weight attached to the growing partition
            cand = max(frontier.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            w = graph.vertex_weight[cand]
            if load + w > target and load >= 0.7 * target:
                break
            frontier.pop(cand)
            part[cand] = pid
            load += w
            for other, ew in graph.adjacency[cand]:
                if part[other] == -1:
                    frontier[other] = frontier.get(other, 0.0) + ew
            if not frontier:
                remaining = np.nonzero(part == -1)[0]
                if remaining.size and load < 0.7 * target:
                    frontier = {int(remaining[0]): 0.0}
            if load >= target:
                break
    part[part == -1] = p - 1
    _refine_balance(graph, part, p)
    return part


def _peripheral_seed(graph: DualGraph, part: np.ndarray) -> int:
    unassigned = np.nonzero(part == -1)[0]
    start = int(unassigned[0])
    seen = {start}
    frontier = [start]
    last = start
    while frontier:
        nxt = []
        for v in frontier:
            for other, _ in graph.adjacency[v]:
                if part[other] == -1 and other not in seen:
                    seen.add(other)
                    nxt.append(other)
        if nxt:
            last = min(nxt)
        frontier = nxt
    return last


def _refine_balance(graph: DualGraph, part: np.ndarray, p: int, tol: float = 1.02,
                    max_moves: int | None = None) -> None:
    loads = np.zeros(p)
    for k in range(part.size):
        loads[part[k]] += graph.vertex_weight[k]
    mean = loads.sum() / p
    moves = 0
    cap = max_moves if max_moves is not None else 4 * part.size
    while loads.max() > tol * mean and moves < cap:
        src = int(np.argmax(loads))
        best = None
        for k in np.nonzero(part == src)[0]:
            dests = {part[o] for o, _ in graph.adjacency[k] if part[o] != src}
            for d in dests:
                if loads[d] >= loads[src] - graph.vertex_weight[k]:
                    continue
                new_spread = max(loads[src] - graph.vertex_weight[k], loads[d] + graph.vertex_weight[k])
                cut_gain = sum(
                    w if part[o] == d else -w if part[o] == src else 0.0
                    for o, w in graph.adjacency[k]
                )
                key = (new_spread, -cut_gain, k)
                if best is None or key < best[0]:
                    best = (key, k, d)
        if best is None:
            break
        _, k, d = best
        loads[part[k]] -= graph.vertex_weight[k]
        part[k] = d
        loads[d] += graph.vertex_weight[k]
        moves += 1


def reorder(part: np.ndarray, clustering: Clustering, roles: np.ndarray) -> np.ndarray:
    """Permutation old->new sorted by (partition, cluster, role, original id).

    Returns ``perm`` with perm[new_index] = old_index; within each
    (partition, cluster) block interior elements form one contiguous range
    and send elements another.
    """
    K = part.size
    order = np.lexsort((np.arange(K), roles, clustering.cluster, part))
    return order


def communication_roles(mesh, part: np.ndarray) -> np.ndarray:
    roles = np.full(mesh.num_elements, ROLE_INTERIOR, dtype=int)
    for k in range(mesh.num_elements):
        for i in range(4):
            kn = mesh.neighbor[k, i]
            if kn >= 0 and part[kn] != part[k]:
                roles[k] = ROLE_SEND
                break
    return roles


def write_partition_report(path, part: np.ndarray, clustering: Clustering) -> None:
    """Per-partition per-cluster element counts (stacked-bar report data)."""
    p = int(part.max()) + 1
    with open(path, "w") as fh:
        fh.write("partition," + ",".join(f"c{l}" for l in range(1, clustering.nc + 1)) + ",total\n")
        for pid in range(p):
            sel = part == pid
            counts = [int(np.sum(clustering.cluster[sel] == l)) for l in range(1, clustering.nc + 1)]
            fh.write(f"{pid}," + ",".join(map(str, counts)) + f",{int(sel.sum())}\n")


# ---------------------------------------------------------------------------
# wire format and transports
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<qqqBB")  # fifo, t0 ticks, t1 ticks, dtype code, pad


def compress_payload(fifo: int, interval: tuple[int, int], product: np.ndarray) -> bytes:
    """Encode one face payload: fixed header plus exactly 9*F*W values."""
    code = 0 if product.dtype == np.float32 else 1
    return _HEADER.pack(fifo, interval[0], interval[1], code, 0) + product.tobytes()


def decode_payload(blob: bytes, nf: int, width: int):
    fifo, t0, t1, code, _ = _HEADER.unpack_from(blob)
    dtype = np.float32 if code == 0 else np.float64
    product = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(9, nf, width)
    return fifo, (int(t0), int(t1)), product


class LoopbackTransport:
    """In-process reference transport: per-destination FIFO queues of encoded
    payloads.  Deterministic: delivery order equals send order."""

    def __init__(self, n_partitions: int, nf: int, width: int):
        self.queues = [deque() for _ in range(n_partitions)]
        self.nf = nf
        self.width = width
        self.sent = 0
        self.delivered = 0

    def send(self, dest: int, fifo: int, interval, payload: np.ndarray) -> None:
        self.queues[dest].append(compress_payload(fifo, interval, payload))
        self.sent += 1

    def poll(self, partition: int):
        out = []
        q = self.queues[partition]
        while q:
            out.append(decode_payload(q.popleft(), self.nf, self.width))
            self.delivered += 1
        return out


# ---------------------------------------------------------------------------
# partition bundles (in memory and on disk)
# ---------------------------------------------------------------------------

FACE_LOCAL = 0
FACE_GHOST = 1
FACE_FREE_SURFACE = 2
FACE_OUTFLOW = 3


@dataclass
class PartitionBundle:
    """Everything one partition worker needs, with no further communication."""

    partition: int
    n_partitions: int
    lam: float
    dt_min: float
    global_ids: np.ndarray  # (n,)
    cluster: np.ndarray  # (n,) levels
    role: np.ndarray  # (n,)
    material: np.ndarray  # (n, 5) rho, vp, vs, qp, qs
    verts: np.ndarray  # (n, 4, 3)
    face_kind: np.ndarray  # (n, 4) FACE_*
    neighbor_local: np.ndarray  # (n, 4) local index or -1
    neighbor_face: np.ndarray  # (n, 4)
    neighbor_orient: np.ndarray  # (n, 4)
    ghost_fifo: np.ndarray  # (n, 4) fifo id or -1
    ghost_relation: np.ndarray  # (n, 4) REL_* (valid where ghost)
    ghost_material: np.ndarray  # (n, 4, 5) remote material where ghost
    send_rules: list[SendRule] = field(default_factory=list)

    @property
    def n_local(self) -> int:
        return self.global_ids.size

    def materials(self) -> list[Material]:
        return [
            Material.from_velocities(rho=r, vp=vp, vs=vs, qp=qp, qs=qs)
            for r, vp, vs, qp, qs in self.material
        ]

    def ghost_materials(self) -> dict[tuple[int, int], Material]:
        out = {}
        for k in range(self.n_local):
            for i in range(4):
                if self.face_kind[k, i] == FACE_GHOST:
                    r, vp, vs, qp, qs = self.ghost_material[k, i]
                    out[(k, i)] = Material.from_velocities(rho=r, vp=vp, vs=vs, qp=qp, qs=qs)
        return out


def build_partition_bundles(
    mesh, geom, clustering: Clustering, part: np.ndarray, nf: int
) -> list[PartitionBundle]:
    """Split a reordered-global view into self-contained per-partition bundles.

    Elements are reordered by (partition, cluster, role, id); cross-partition
    faces get one receive fifo per direction plus the mirroring send rule with
    the receiver-recorded flux-matrix indices.
    """
    K = mesh.num_elements
    p = int(part.max()) + 1
    roles = communication_roles(mesh, part)
    perm = reorder(part, clustering, roles)  # perm[new] = old
    inv = np.empty(K, dtype=int)
    inv[perm] = np.arange(K)
    local_index = np.empty(K, dtype=int)
    bundles = []
    mat_arr = np.array(
        [[m.rho, m.vp, m.vs, m.qp, m.qs] for m in mesh.materials]
    )
    for pid in range(p):
        members = perm[part[perm] == pid]  # old ids in new order
        local_index[members] = np.arange(members.size)
        n = members.size
        bundles.append(
            PartitionBundle(
                partition=pid,
                n_partitions=p,
                lam=clustering.lam,
                dt_min=clustering.dt_min,
                global_ids=members.copy(),
                cluster=clustering.cluster[members].copy(),
                role=roles[members].copy(),
                material=mat_arr[members].copy(),
                verts=geom.elem_verts[members].copy(),
                face_kind=np.zeros((n, 4), int),
                neighbor_local=np.full((n, 4), -1, int),
                neighbor_face=np.full((n, 4), -1, int),
                neighbor_orient=np.zeros((n, 4), int),
                ghost_fifo=np.full((n, 4), -1, int),
                ghost_relation=np.zeros((n, 4), int),
                ghost_material=np.zeros((n, 4, 5)),
            )
        )
    rel_code = {0: REL_EQUAL, -1: REL_NEIGHBOR_FINER, 1: REL_NEIGHBOR_COARSER}
    bnd_to_face = {1: FACE_FREE_SURFACE, 2: FACE_OUTFLOW}
    fifo_count = [0] * p
    for pid in range(p):
        b = bundles[pid]
        for loc, old in enumerate(b.global_ids):
            for i in range(4):
                kn = mesh.neighbor[old, i]
                if kn < 0:
                    code = int(mesh.boundary[old, i])
                    if code == BND_INTERIOR:
                        raise PartitionError(f"element {old} face {i}: untagged boundary")
                    b.face_kind[loc, i] = bnd_to_face[code]
                    continue
                b.neighbor_face[loc, i] = mesh.neighbor_face[old, i]
                b.neighbor_orient[loc, i] = mesh.neighbor_orient[old, i]
                if part[kn] == pid:
                    b.face_kind[loc, i] = FACE_LOCAL
                    b.neighbor_local[loc, i] = local_index[kn]
                else:
                    # receive fifo on this side, mirrored send rule on the other
                    b.face_kind[loc, i] = FACE_GHOST
                    fifo = fifo_count[pid]
                    fifo_count[pid] += 1
                    b.ghost_fifo[loc, i] = fifo
                    d = int(clustering.cluster[kn] - clustering.cluster[old])
                    b.ghost_relation[loc, i] = rel_code[d]
                    b.ghost_material[loc, i] = mat_arr[kn]
                    bundles[part[kn]].send_rules.append(
                        SendRule(
                            elem=int(local_index[kn]),
                            face=int(mesh.neighbor_face[old, i]),
                            orient_recv=int(mesh.neighbor_orient[old, i]),
                            relation=rel_code[d],
                            dest_partition=pid,
                            dest_fifo=fifo,
                        )
                    )
    return bundles


FACE_TO_BND = {FACE_LOCAL: 0, FACE_GHOST: 0, FACE_FREE_SURFACE: 1, FACE_OUTFLOW: 2}


def make_worker(
    bundle: PartitionBundle,
    refmats,
    relax,
    t_end: float,
    width: int = 1,
    dtype=np.float64,
    transport=None,
    sources=None,
    receivers=None,
    record_actions: bool = False,
):
    """Build a scheduler worker from one self-contained partition bundle."""
    from .equations import build_element_operators
    from .kernels import KernelContext
    from .lts import DomainWorker

    boundary_kind = np.vectorize(FACE_TO_BND.get)(bundle.face_kind)
    ops = build_element_operators(
        bundle.verts,
        bundle.materials(),
        bundle.neighbor_local,
        boundary_kind,
        relax,
        ghost_materials=bundle.ghost_materials(),
    )
    ctx = KernelContext.create(refmats, ops, width=width, dtype=dtype)
    return DomainWorker(
        ctx,
        refmats,
        bundle.cluster,
        bundle.lam,
        bundle.dt_min,
        t_end,
        bundle.neighbor_local,
        bundle.neighbor_face,
        bundle.neighbor_orient,
        ghost_fifo=bundle.ghost_fifo,
        ghost_relation=bundle.ghost_relation,
        send_rules=bundle.send_rules,
        transport=transport,
        partition=bundle.partition,
        sources=sources,
        receivers=receivers,
        record_actions=record_actions,
    )


def run_partitioned(workers, transport) -> None:
    """Cooperative single-thread drive loop over all partition workers.

    Workers share nothing but the transport; each pass lets every worker run
    all of its currently eligible actions.  No progress with work remaining
    is a protocol error (lost or missing payloads).
    """
    for w in workers:
        w._initial_predictions()
    while True:
        if all(w.done() for w in workers):
            break
        progressed = False
        for w in workers:
            progressed |= w.try_advance()
        if not progressed:
            raise ProtocolError(
                "no worker can advance; payload lost or schedule violated"
            )
    if transport is not None and transport.sent != transport.delivered:
        raise ProtocolError(
            f"message conservation violated: sent {transport.sent}, delivered {transport.delivered}"
        )


# ---------------------------------------------------------------------------
# binary partition files (layout documented in docs/file-formats.md)
# ---------------------------------------------------------------------------

_MAGIC = b"TDGP"
_FILE_VERSION = 1
# magic, version, partition, n_partitions, order, mechanisms, n_local, lam, dt_min
_HEAD = struct.Struct("<4sIIIIIqdd")

_ELEM_DT = np.dtype(
    [
        ("global_id", "<i8"),
        ("cluster", "<i4"),
        ("role", "<i4"),
        ("material", "<f8", 5),
        ("verts", "<f8", (4, 3)),
        ("face_kind", "<i1", 4),
        ("neighbor_local", "<i8", 4),
        ("neighbor_face", "<i1", 4),
        ("neighbor_orient", "<i1", 4),
        ("ghost_fifo", "<i8", 4),
        ("ghost_relation", "<i1", 4),
        ("ghost_material", "<f8", (4, 5)),
    ]
)

_RULE_DT = np.dtype(
    [
        ("elem", "<i8"),
        ("face", "<i1"),
        ("orient_recv", "<i1"),
        ("relation", "<i1"),
        ("dest_partition", "<i4"),
        ("dest_fifo", "<i8"),
    ]
)


def write_partition_file(path, bundle: PartitionBundle, order: int = 0,
                         mechanisms: int = 0) -> None:
    elems = np.zeros(bundle.n_local, dtype=_ELEM_DT)
    elems["global_id"] = bundle.global_ids
    elems["cluster"] = bundle.cluster
    elems["role"] = bundle.role
    elems["material"] = bundle.material
    elems["verts"] = bundle.verts
    elems["face_kind"] = bundle.face_kind
    elems["neighbor_local"] = bundle.neighbor_local
    elems["neighbor_face"] = bundle.neighbor_face
    elems["neighbor_orient"] = bundle.neighbor_orient
    elems["ghost_fifo"] = bundle.ghost_fifo
    elems["ghost_relation"] = bundle.ghost_relation
    elems["ghost_material"] = bundle.ghost_material
    rules = np.zeros(len(bundle.send_rules), dtype=_RULE_DT)
    for r, rule in zip(rules, bundle.send_rules):
        r["elem"] = rule.elem
        r["face"] = rule.face
        r["orient_recv"] = rule.orient_recv
        r["relation"] = rule.relation
        r["dest_partition"] = rule.dest_partition
        r["dest_fifo"] = rule.dest_fifo
    with open(path, "wb") as fh:
        fh.write(
            _HEAD.pack(
                _MAGIC,
                _FILE_VERSION,
                bundle.partition,
                bundle.n_partitions,
                order,
                mechanisms,
                bundle.n_local,
                bundle.lam,
                bundle.dt_min,
            )
        )
        fh.write(struct.pack("<q", len(bundle.send_rules)))
        fh.write(elems.tobytes())
        fh.write(rules.tobytes())


def read_partition_file(path, expect_order: int | None = None,
                        expect_mechanisms: int | None = None) -> PartitionBundle:
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        magic, version, pid, npart, order, mechs, n_local, lam, dt_min = _HEAD.unpack(head)
        if magic != _MAGIC or version != _FILE_VERSION:
            raise PartitionError(f"{path}: bad magic/version {magic!r}/{version}")
        if expect_order is not None and order and order != expect_order:
            raise PartitionError(
                f"{path}: preprocessed for order {order}, run asked {expect_order}"
            )
        if expect_mechanisms is not None and mechs != expect_mechanisms:
            raise PartitionError(
                f"{path}: preprocessed for {mechs} mechanisms, run asked {expect_mechanisms}"
            )
        (n_rules,) = struct.unpack("<q", fh.read(8))
        elems = np.frombuffer(fh.read(n_local * _ELEM_DT.itemsize), dtype=_ELEM_DT)
        rules_arr = np.frombuffer(fh.read(n_rules * _RULE_DT.itemsize), dtype=_RULE_DT)
    rules = [
        SendRule(
            elem=int(r["elem"]),
            face=int(r["face"]),
            orient_recv=int(r["orient_recv"]),
            relation=int(r["relation"]),
            dest_partition=int(r["dest_partition"]),
            dest_fifo=int(r["dest_fifo"]),
        )
        for r in rules_arr
    ]
    return PartitionBundle(
        partition=pid,
        n_partitions=npart,
        lam=lam,
        dt_min=dt_min,
        global_ids=elems["global_id"].astype(int),
        cluster=elems["cluster"].astype(int),
        role=elems["role"].astype(int),
        material=elems["material"].copy(),
        verts=elems["verts"].copy(),
        face_kind=elems["face_kind"].astype(int),
        neighbor_local=elems["neighbor_local"].astype(int),
        neighbor_face=elems["neighbor_face"].astype(int),
        neighbor_orient=elems["neighbor_orient"].astype(int),
        ghost_fifo=elems["ghost_fifo"].astype(int),
        ghost_relation=elems["ghost_relation"].astype(int),
        ghost_material=elems["ghost_material"].copy(),
        send_rules=rules,
    )
