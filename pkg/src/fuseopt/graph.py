"""HLO-like IR for one data-parallel training iteration.

A graph holds compute/parameter/control ops, data edges, AllReduce
instructions on gradient tensors, and the current fusion state: a
partition of ops into fusion groups and a partition of AllReduce
instructions into tensor buckets. Graphs are immutable; rewrites build
new values.

Duplicate fusion reuses op ids: the replicated op keeps its normal
membership in the merged group and additionally appears, marked in
``duplicated_ops``, in a replica group. The group that *exports* an
op's output (feeds its external consumers and its AllReduce) is the
replica group when one exists, otherwise the op's normal group. All
contracted-graph structure is derived from this rule, so the original
edge list never changes.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from .errors import CycleError, GraphFormatError, MissingCost

KIND_COMPUTE = "compute"
KIND_PARAMETER = "parameter"
KIND_CONTROL = "control"
OP_KINDS = (KIND_COMPUTE, KIND_PARAMETER, KIND_CONTROL)


@dataclass(frozen=True)
class OpNode:
    """One HLO instruction. ``input_shape_key`` is an opaque signature
    used, together with ``op_code``, as the profile lookup key."""

    id: int
    op_code: str
    kind: str = KIND_COMPUTE
    input_shape_key: str = ""
    out_bytes: int = 0
    compute_us: Optional[float] = None


@dataclass(frozen=True)
class DataEdge:
    src: int
    dst: int
    bytes: int = 0


@dataclass(frozen=True)
class AllReduceInstr:
    """One collective on one gradient tensor; ``bucket`` mirrors the
    bucket partition and is kept consistent by every rewrite."""

    id: int
    producer_op: int
    tensor_bytes: int
    bucket: int


@dataclass(frozen=True)
class FusionGroup:
    """A fused kernel. ``duplicated_ops`` marks members that are replica
    copies of ops whose normal membership lives in another group."""

    id: int
    member_ops: frozenset[int]
    duplicated_ops: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_ops", frozenset(self.member_ops))
        object.__setattr__(self, "duplicated_ops", frozenset(self.duplicated_ops))


@dataclass(frozen=True)
class TensorBucket:
    """A set of AllReduce instructions sharing one transmission."""

    id: int
    members: tuple[int, ...]
    total_bytes: int


@dataclass(frozen=True)
class GraphMeta:
    name: str = "unnamed"
    devices: int = 2
    seed: int = 0


class GroupIO(NamedTuple):
    """Byte traffic of a group seen as one fused kernel."""

    internal_bytes: int
    external_in_bytes: int
    external_out_bytes: int


class ModuleStats(NamedTuple):
    total_compute_us: float
    total_comm_us: float
    op_count: int
    bucket_count: int


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


class _Index:
    """Derived lookups for a structurally sound graph. Built lazily and
    cached; callers must run the raw-field checks first (validate_module
    does) before trusting it on untrusted input."""

    def __init__(self, g: "HloGraph") -> None:
        self.op_by_id = {op.id: op for op in g.ops}
        self.group_by_id = {gr.id: gr for gr in g.groups}
        self.bucket_by_id = {b.id: b for b in g.buckets}
        self.instr_by_id = {ar.id: ar for ar in g.allreduces}

        self.in_edges: dict[int, list[DataEdge]] = {op.id: [] for op in g.ops}
        self.out_edges: dict[int, list[DataEdge]] = {op.id: [] for op in g.ops}
        for e in g.edges:
            self.out_edges[e.src].append(e)
            self.in_edges[e.dst].append(e)

        # Normal membership (exactly one per op on valid graphs) and the
        # optional replica membership.
        self.normal_group_of: dict[int, int] = {}
        self.replica_group_of: dict[int, int] = {}
        self.groups_of: dict[int, list[int]] = {op.id: [] for op in g.ops}
        for gr in g.groups:
            for m in gr.member_ops:
                self.groups_of[m].append(gr.id)
                if m in gr.duplicated_ops:
                    self.replica_group_of[m] = gr.id
                else:
                    self.normal_group_of[m] = gr.id

        self.instrs_of_producer: dict[int, list[AllReduceInstr]] = {}
        for ar in g.allreduces:
            self.instrs_of_producer.setdefault(ar.producer_op, []).append(ar)

        self.bucket_of_instr: dict[int, int] = {}
        for b in g.buckets:
            for m in b.members:
                self.bucket_of_instr[m] = b.id

        self._graph = g

    def export_group(self, op_id: int) -> int:
        return self.replica_group_of.get(op_id, self.normal_group_of[op_id])

    @cached_property
    def contracted_succs(self) -> dict[int, set[int]]:
        """Group-level adjacency: export group of the producer feeds
        every group holding a copy of the consumer."""
        succs: dict[int, set[int]] = {gr.id: set() for gr in self._graph.groups}
        for e in self._graph.edges:
            src_gid = self.export_group(e.src)
            for gid in self.groups_of[e.dst]:
                if e.src not in self.group_by_id[gid].member_ops:
                    succs[src_gid].add(gid)
        return succs

    @cached_property
    def contracted_preds(self) -> dict[int, set[int]]:
        preds: dict[int, set[int]] = {gr.id: set() for gr in self._graph.groups}
        for gid, outs in self.contracted_succs.items():
            for h in outs:
                preds[h].add(gid)
        return preds

    @cached_property
    def group_io(self) -> dict[int, GroupIO]:
        """One pass over the edge list computing each group's internal,
        external-in and external-out byte traffic.

        A member's output counts as external-out of its export group
        when anything outside reads it: an AllReduce, a consumer copy in
        a group not containing the member, or nothing at all (graph
        outputs are materialized). Each output is counted once.
        """
        g = self._graph
        internal = {gr.id: 0 for gr in g.groups}
        ext_in = {gr.id: 0 for gr in g.groups}
        ext_out = {gr.id: 0 for gr in g.groups}
        visible: set[int] = set()
        for e in g.edges:
            for gid in self.groups_of[e.dst]:
                if e.src in self.group_by_id[gid].member_ops:
                    internal[gid] += e.bytes
                else:
                    ext_in[gid] += e.bytes
                    visible.add(e.src)
        for op in g.ops:
            if (
                op.id in visible
                or not self.out_edges[op.id]
                or op.id in self.instrs_of_producer
            ):
                ext_out[self.export_group(op.id)] += op.out_bytes
        return {
            gr.id: GroupIO(internal[gr.id], ext_in[gr.id], ext_out[gr.id])
            for gr in g.groups
        }

    @cached_property
    def bucket_ready_deps(self) -> dict[int, set[int]]:
        """bucket id -> producing group ids (tensor production)."""
        deps: dict[int, set[int]] = {b.id: set() for b in self._graph.buckets}
        for b in self._graph.buckets:
            for m in b.members:
                ar = self.instr_by_id[m]
                deps[b.id].add(self.export_group(ar.producer_op))
        return deps

    def _consumes_aggregate(self, e: DataEdge) -> bool:
        """An edge from an AllReduce producer into a terminal op that
        emits no gradient of its own carries the aggregated tensor: that
        is the parameter-update position, and only there does the
        consumer wait for the bucket. Every other consumer reads the raw
        output, which is what lets neighboring chained tensors fuse."""
        return (
            bool(self.instrs_of_producer.get(e.src))
            and not self.out_edges[e.dst]
            and e.dst not in self.instrs_of_producer
        )

    @cached_property
    def group_bucket_deps(self) -> dict[int, set[int]]:
        """group id -> bucket ids it must wait for."""
        deps: dict[int, set[int]] = {gr.id: set() for gr in self._graph.groups}
        for e in self._graph.edges:
            if not self._consumes_aggregate(e):
                continue
            for ar in self.instrs_of_producer[e.src]:
                for gid in self.groups_of[e.dst]:
                    deps[gid].add(self.bucket_of_instr[ar.id])
        return deps

    @cached_property
    def group_group_deps(self) -> dict[int, set[int]]:
        """group id -> plain predecessor groups (aggregate-consuming
        edges excluded; those are covered by group_bucket_deps)."""
        deps: dict[int, set[int]] = {gr.id: set() for gr in self._graph.groups}
        for e in self._graph.edges:
            if self._consumes_aggregate(e):
                continue
            src_gid = self.export_group(e.src)
            for gid in self.groups_of[e.dst]:
                if e.src not in self.group_by_id[gid].member_ops:
                    deps[gid].add(src_gid)
        return deps

    @cached_property
    def schedule_deps(self) -> dict[tuple[str, int], set[tuple[str, int]]]:
        """Joint dependency structure over groups and buckets, shared by
        the validity cycle check and the simulator."""
        g = self._graph
        deps: dict[tuple[str, int], set[tuple[str, int]]] = {}
        for gr in g.groups:
            deps[("g", gr.id)] = {("g", p) for p in self.group_group_deps[gr.id]}
            deps[("g", gr.id)] |= {("b", b) for b in self.group_bucket_deps[gr.id]}
        for b in g.buckets:
            deps[("b", b.id)] = {("g", p) for p in self.bucket_ready_deps[b.id]}
        return deps


@dataclass(frozen=True)
class HloGraph:
    """Whole-iteration module: ops + edges + collectives + fusion state."""

    meta: GraphMeta
    ops: tuple[OpNode, ...]
    edges: tuple[DataEdge, ...]
    allreduces: tuple[AllReduceInstr, ...]
    groups: tuple[FusionGroup, ...]
    buckets: tuple[TensorBucket, ...]

    @cached_property
    def index(self) -> _Index:
        return _Index(self)

    def op(self, op_id: int) -> OpNode:
        return self.index.op_by_id[op_id]

    def group(self, gid: int) -> FusionGroup:
        return self.index.group_by_id[gid]

    def bucket(self, bid: int) -> TensorBucket:
        return self.index.bucket_by_id[bid]


def build_graph(
    ops: Iterable[OpNode],
    edges: Iterable[DataEdge] = (),
    allreduces: Iterable[tuple[int, int, int]] = (),
    groups: Optional[Iterable[FusionGroup]] = None,
    buckets: Optional[Iterable[tuple[int, Sequence[int]]]] = None,
    meta: GraphMeta = GraphMeta(),
) -> HloGraph:
    """Assemble a graph, defaulting to the unfused state: one singleton
    group per op (group id = op id) and one bucket per AllReduce
    (bucket id = instruction id). ``allreduces`` entries are
    (id, producer_op, tensor_bytes) triples."""
    ops = tuple(sorted(ops, key=lambda o: o.id))
    edges = tuple(sorted(edges, key=lambda e: (e.src, e.dst)))
    ar_triples = sorted(allreduces)
    if groups is None:
        groups = [FusionGroup(op.id, frozenset({op.id})) for op in ops]
    groups = tuple(sorted(groups, key=lambda gr: gr.id))
    if buckets is None:
        bucket_specs = [(ar_id, (ar_id,)) for ar_id, _, _ in ar_triples]
    else:
        bucket_specs = [(bid, tuple(members)) for bid, members in buckets]
    bucket_specs.sort()

    bucket_of = {m: bid for bid, members in bucket_specs for m in members}
    instrs = tuple(
        AllReduceInstr(ar_id, producer, nbytes, bucket_of.get(ar_id, ar_id))
        for ar_id, producer, nbytes in ar_triples
    )
    by_id = {ar.id: ar for ar in instrs}
    bucket_objs = tuple(
        TensorBucket(
            bid,
            tuple(members),
            sum(by_id[m].tensor_bytes for m in members if m in by_id),
        )
        for bid, members in bucket_specs
    )
    return HloGraph(meta, ops, edges, instrs, groups, bucket_objs)


# ---------------------------------------------------------------------------
# Validation


def _raw_violations(g: HloGraph) -> list[str]:
    """Field-level checks that must pass before the index is usable."""
    out: list[str] = []
    op_ids = [op.id for op in g.ops]
    if len(set(op_ids)) != len(op_ids):
        out.append("duplicate op ids")
    known = set(op_ids)
    for op in g.ops:
        if op.kind not in OP_KINDS:
            out.append(f"op {op.id}: unknown kind {op.kind!r}")
        if op.out_bytes < 0:
            out.append(f"op {op.id}: negative out_bytes")
        if op.compute_us is not None and not op.compute_us > 0:
            out.append(f"op {op.id}: compute_us must be > 0 when present")
    for e in g.edges:
        if e.src == e.dst:
            out.append(f"edge {e.src}->{e.dst}: self loop")
        if e.src not in known or e.dst not in known:
            out.append(f"edge {e.src}->{e.dst}: missing endpoint")
        if e.bytes < 0:
            out.append(f"edge {e.src}->{e.dst}: negative bytes")
    ar_ids = [ar.id for ar in g.allreduces]
    if len(set(ar_ids)) != len(ar_ids):
        out.append("duplicate AllReduce ids")
    kind_of = {op.id: op.kind for op in g.ops}
    for ar in g.allreduces:
        if ar.producer_op not in known:
            out.append(f"allreduce {ar.id}: producer {ar.producer_op} missing")
        elif kind_of[ar.producer_op] != KIND_COMPUTE:
            out.append(f"allreduce {ar.id}: producer is not a compute op")
        if ar.tensor_bytes <= 0:
            out.append(f"allreduce {ar.id}: tensor_bytes must be > 0")
    gids = [gr.id for gr in g.groups]
    if len(set(gids)) != len(gids):
        out.append("duplicate group ids")
    for gr in g.groups:
        if not gr.member_ops:
            out.append(f"group {gr.id}: empty")
        if not gr.duplicated_ops <= gr.member_ops:
            out.append(f"group {gr.id}: duplicated_ops not a subset of members")
        for m in gr.member_ops:
            if m not in known:
                out.append(f"group {gr.id}: unknown member op {m}")
    bids = [b.id for b in g.buckets]
    if len(set(bids)) != len(bids):
        out.append("duplicate bucket ids")
    ar_by_id = {ar.id: ar for ar in g.allreduces}
    for b in g.buckets:
        if not b.members:
            out.append(f"bucket {b.id}: empty")
        for m in b.members:
            if m not in ar_by_id:
                out.append(f"bucket {b.id}: unknown AllReduce {m}")
        got = sum(ar_by_id[m].tensor_bytes for m in b.members if m in ar_by_id)
        if got != b.total_bytes:
            out.append(f"bucket {b.id}: total_bytes {b.total_bytes} != sum {got}")
    return out


def _op_edges_acyclic(g: HloGraph) -> bool:
    succs: dict[int, list[int]] = {op.id: [] for op in g.ops}
    indeg = {op.id: 0 for op in g.ops}
    for e in g.edges:
        succs[e.src].append(e.dst)
        indeg[e.dst] += 1
    stack = [o for o, d in indeg.items() if d == 0]
    seen = 0
    while stack:
        u = stack.pop()
        seen += 1
        for v in succs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                stack.append(v)
    return seen == len(g.ops)


def _partition_violations(g: HloGraph) -> list[str]:
    out: list[str] = []
    normal: dict[int, int] = {}
    replica: dict[int, int] = {}
    kind_of = {op.id: op.kind for op in g.ops}
    for gr in g.groups:
        if len(gr.member_ops) > 1:
            for m in gr.member_ops:
                if kind_of.get(m) != KIND_COMPUTE:
                    out.append(f"group {gr.id}: {kind_of.get(m)} op {m} in multi-op group")
        for m in gr.member_ops:
            if m in gr.duplicated_ops:
                if kind_of.get(m) != KIND_COMPUTE:
                    out.append(f"group {gr.id}: non-compute op {m} duplicated")
                replica[m] = replica.get(m, 0) + 1
            else:
                normal[m] = normal.get(m, 0) + 1
    for op in g.ops:
        n = normal.get(op.id, 0)
        if n != 1:
            out.append(f"op {op.id}: {n} normal group memberships (want exactly 1)")
        if replica.get(op.id, 0) > 1:
            out.append(f"op {op.id}: more than one replica membership")
    members_seen: dict[int, int] = {}
    for b in g.buckets:
        for m in b.members:
            members_seen[m] = members_seen.get(m, 0) + 1
    for ar in g.allreduces:
        if members_seen.get(ar.id, 0) != 1:
            out.append(f"allreduce {ar.id}: not in exactly one bucket")
        else:
            holder = next(b.id for b in g.buckets if ar.id in b.members)
            if ar.bucket != holder:
                out.append(f"allreduce {ar.id}: bucket field {ar.bucket} != holder {holder}")
    return out


def _connectivity_violations(g: HloGraph) -> list[str]:
    out = []
    adj: dict[int, set[int]] = {}
    for e in g.edges:
        adj.setdefault(e.src, set()).add(e.dst)
        adj.setdefault(e.dst, set()).add(e.src)
    for gr in g.groups:
        members = gr.member_ops
        start = next(iter(members))
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj.get(u, ()):
                if v in members and v not in seen:
                    seen.add(v)
                    stack.append(v)
        if seen != members:
            out.append(f"group {gr.id}: members do not induce a connected subgraph")
    return out


def _schedule_nodes_and_deps(g: HloGraph):
    return g.index.schedule_deps


def _deps_acyclic(deps: Mapping[tuple, set]) -> bool:
    indeg = {n: len(ps) for n, ps in deps.items()}
    succs: dict[tuple, list[tuple]] = {n: [] for n in deps}
    for n, ps in deps.items():
        for p in ps:
            succs[p].append(n)
    stack = [n for n, d in indeg.items() if d == 0]
    seen = 0
    while stack:
        u = stack.pop()
        seen += 1
        for v in succs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                stack.append(v)
    return seen == len(deps)


def rewrite_candidate_ok(candidate: HloGraph) -> tuple[bool, str]:
    """Validity shortcut for candidates produced by a rewrite of a valid
    graph: adjacency-based merges keep every per-field and partition
    invariant by construction, so only acyclicity of the joint
    group/bucket dependency structure can break."""
    if not _deps_acyclic(_schedule_nodes_and_deps(candidate)):
        return False, "group contraction (with bucket dependencies) is cyclic"
    return True, ""


def validate_module(g: HloGraph) -> ValidationReport:
    """Full structural validation; violations are data, not exceptions."""
    violations = _raw_violations(g)
    if violations:
        return ValidationReport(False, tuple(violations))
    if not _op_edges_acyclic(g):
        violations.append("op-level edges contain a cycle")
        return ValidationReport(False, tuple(violations))
    violations += _partition_violations(g)
    if violations:
        return ValidationReport(False, tuple(violations))
    violations += _connectivity_violations(g)
    if not _deps_acyclic(_schedule_nodes_and_deps(g)):
        violations.append("group contraction (with bucket dependencies) is cyclic")
    return ValidationReport(not violations, tuple(violations))


# ---------------------------------------------------------------------------
# Structure queries


def topo_order(g: HloGraph) -> list[int]:
    """Deterministic topological order of group ids over the contracted
    graph; ties go to the group with the smallest member op id."""
    idx = g.index
    indeg = {gr.id: 0 for gr in g.groups}
    for gid, ps in idx.contracted_preds.items():
        indeg[gid] = len(ps)
    key = {gr.id: min(gr.member_ops) for gr in g.groups}
    heap = [(key[gid], gid) for gid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[int] = []
    while heap:
        _, gid = heapq.heappop(heap)
        order.append(gid)
        for h in sorted(idx.contracted_succs[gid]):
            indeg[h] -= 1
            if indeg[h] == 0:
                heapq.heappush(heap, (key[h], h))
    if len(order) != len(g.groups):
        raise CycleError("contracted group graph is cyclic")
    return order


def canonical_hash(g: HloGraph) -> int:
    """64-bit digest of graph content plus fusion state. Group and
    bucket ids and all internal orderings are canonicalized away, so
    equal fusion states hash equal."""
    payload = (
        (g.meta.name, g.meta.devices, g.meta.seed),
        tuple(
            (op.id, op.op_code, op.kind, op.input_shape_key, op.out_bytes, op.compute_us)
            for op in sorted(g.ops, key=lambda o: o.id)
        ),
        tuple(sorted((e.src, e.dst, e.bytes) for e in g.edges)),
        tuple(sorted((ar.id, ar.producer_op, ar.tensor_bytes) for ar in g.allreduces)),
        tuple(
            sorted(
                (tuple(sorted(gr.member_ops)), tuple(sorted(gr.duplicated_ops)))
                for gr in g.groups
            )
        ),
        tuple(sorted(tuple(sorted(b.members)) for b in g.buckets)),
    )
    digest = hashlib.blake2b(repr(payload).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def module_stats(
    g: HloGraph,
    costs: Mapping[int, float],
    comm: Mapping[int, float],
) -> ModuleStats:
    """Exact compute/communication totals from per-group and per-bucket
    durations."""
    for gr in g.groups:
        if gr.id not in costs:
            raise MissingCost(f"no duration for group {gr.id}")
    for b in g.buckets:
        if b.id not in comm:
            raise MissingCost(f"no duration for bucket {b.id}")
    return ModuleStats(
        total_compute_us=float(sum(costs[gr.id] for gr in g.groups)),
        total_comm_us=float(sum(comm[b.id] for b in g.buckets)),
        op_count=len(g.groups),
        bucket_count=len(g.buckets),
    )


def group_io(g: HloGraph, gid: int) -> GroupIO:
    return g.index.group_io[gid]


# ---------------------------------------------------------------------------
# Graph file format (JSON, one document per file)

_TOP_KEYS = {"meta", "ops", "edges", "allreduce", "groups", "buckets"}
_META_KEYS = {"name", "devices", "seed"}
_OP_KEYS = {"id", "op_code", "kind", "input_shape_key", "out_bytes", "compute_us"}
_EDGE_KEYS = {"src", "dst", "bytes"}
_AR_KEYS = {"id", "producer_op", "tensor_bytes"}
_GROUP_KEYS = {"id", "members", "duplicated"}
_BUCKET_KEYS = {"id", "members"}


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise GraphFormatError(f"{where}: unknown keys {sorted(unknown)}")


def graph_to_doc(g: HloGraph, explicit_state: bool = False) -> dict:
    """``explicit_state`` forces the groups/buckets arrays even for the
    default unfused state (used for strategy output files)."""
    doc: dict = {
        "meta": {"name": g.meta.name, "devices": g.meta.devices, "seed": g.meta.seed},
        "ops": [
            {
                "id": op.id,
                "op_code": op.op_code,
                "kind": op.kind,
                "input_shape_key": op.input_shape_key,
                "out_bytes": op.out_bytes,
                **({"compute_us": op.compute_us} if op.compute_us is not None else {}),
            }
            for op in g.ops
        ],
        "edges": [{"src": e.src, "dst": e.dst, "bytes": e.bytes} for e in g.edges],
        "allreduce": [
            {"id": ar.id, "producer_op": ar.producer_op, "tensor_bytes": ar.tensor_bytes}
            for ar in g.allreduces
        ],
    }
    trivially_grouped = all(
        len(gr.member_ops) == 1 and not gr.duplicated_ops and gr.id in gr.member_ops
        for gr in g.groups
    ) and len(g.groups) == len(g.ops)
    if explicit_state or not trivially_grouped:
        doc["groups"] = [
            {
                "id": gr.id,
                "members": sorted(gr.member_ops),
                "duplicated": sorted(gr.duplicated_ops),
            }
            for gr in g.groups
        ]
    trivially_bucketed = all(
        len(b.members) == 1 and b.id in b.members for b in g.buckets
    ) and len(g.buckets) == len(g.allreduces)
    if explicit_state or not trivially_bucketed:
        doc["buckets"] = [{"id": b.id, "members": sorted(b.members)} for b in g.buckets]
    return doc


def graph_from_doc(doc: dict) -> HloGraph:
    if not isinstance(doc, dict):
        raise GraphFormatError("graph document must be an object")
    _check_keys(doc, _TOP_KEYS, "top level")
    meta_doc = doc.get("meta", {})
    _check_keys(meta_doc, _META_KEYS, "meta")
    meta = GraphMeta(
        name=str(meta_doc.get("name", "unnamed")),
        devices=int(meta_doc.get("devices", 2)),
        seed=int(meta_doc.get("seed", 0)),
    )
    ops = []
    for o in doc.get("ops", []):
        _check_keys(o, _OP_KEYS, "op")
        try:
            ops.append(
                OpNode(
                    id=int(o["id"]),
                    op_code=str(o["op_code"]),
                    kind=str(o.get("kind", KIND_COMPUTE)),
                    input_shape_key=str(o.get("input_shape_key", "")),
                    out_bytes=int(o.get("out_bytes", 0)),
                    compute_us=None if o.get("compute_us") is None else float(o["compute_us"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"bad op record: {o!r}") from exc
    edges = []
    for e in doc.get("edges", []):
        _check_keys(e, _EDGE_KEYS, "edge")
        try:
            edges.append(DataEdge(int(e["src"]), int(e["dst"]), int(e.get("bytes", 0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"bad edge record: {e!r}") from exc
    ars = []
    for a in doc.get("allreduce", []):
        _check_keys(a, _AR_KEYS, "allreduce")
        try:
            ars.append((int(a["id"]), int(a["producer_op"]), int(a["tensor_bytes"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"bad allreduce record: {a!r}") from exc
    groups = None
    if "groups" in doc:
        groups = []
        for gr in doc["groups"]:
            _check_keys(gr, _GROUP_KEYS, "group")
            groups.append(
                FusionGroup(
                    int(gr["id"]),
                    frozenset(int(m) for m in gr["members"]),
                    frozenset(int(m) for m in gr.get("duplicated", [])),
                )
            )
    buckets = None
    if "buckets" in doc:
        buckets = []
        for b in doc["buckets"]:
            _check_keys(b, _BUCKET_KEYS, "bucket")
            buckets.append((int(b["id"]), [int(m) for m in b["members"]]))
    return build_graph(ops, edges, ars, groups=groups, buckets=buckets, meta=meta)


def save_graph(path, g: HloGraph, explicit_state: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_doc(g, explicit_state=explicit_state), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_graph(path) -> HloGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{path}: not valid JSON") from exc
    return graph_from_doc(doc)


def with_fusion_state(
    g: HloGraph,
    groups: Iterable[FusionGroup],
    buckets: Optional[Iterable[TensorBucket]] = None,
    allreduces: Optional[Iterable[AllReduceInstr]] = None,
) -> HloGraph:
    """New graph sharing ops/edges with replaced fusion state."""
    return HloGraph(
        meta=g.meta,
        ops=g.ops,
        edges=g.edges,
        allreduces=g.allreduces if allreduces is None else tuple(allreduces),
        groups=tuple(sorted(groups, key=lambda gr: gr.id)),
        buckets=g.buckets if buckets is None else tuple(sorted(buckets, key=lambda b: b.id)),
    )
