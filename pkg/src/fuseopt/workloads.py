"""Synthetic training-iteration graphs and a deterministic hardware
oracle standing in for real GPU profiling.

The oracle charges each group its members' raw compute, one kernel
launch, and a memory cost for every externally-moved byte. That is the
smallest model in which both motivating effects appear: fusing across a
fat intermediate tensor pays off, and fusing a gradient producer delays
its AllReduce.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .comm import CommModelParams, CommSample, predict as comm_predict
from .errors import InvalidConfig
from .estimator import Profile, SubgraphFeatures, featurize
from .graph import (
    KIND_COMPUTE,
    DataEdge,
    FusionGroup,
    GraphMeta,
    HloGraph,
    OpNode,
    build_graph,
    group_io,
)
from .rewrite import fuse_nondup, fusible_pairs
from .simulator import CostProviders

FAMILIES = ("chain", "residual", "attention", "recurrent")

_DEFAULT_RATES = {
    "Conv2D": 2.0,
    "MatMul": 1.5,
    "BatchNorm": 0.2,
    "Softmax": 0.3,
    "LayerNorm": 0.25,
    "ReLU": 0.05,
    "Add": 0.05,
    "Mul": 0.05,
    "Sigmoid": 0.08,
    "Tanh": 0.08,
    "GradW": 0.4,
}
_DEFAULT_RATE = 0.1


@dataclass(frozen=True)
class HardwareParams:
    """Synthetic device model: kernel launch overhead, memory cost per
    byte, per-op-code compute rates (microseconds per KB of output), the
    AllReduce linear model used to fabricate comm measurements, and an
    optional deterministic measurement jitter."""

    launch_overhead_us: float = 5.0
    mem_us_per_byte: float = 1.0 / 1024.0
    compute_rates: dict = field(default_factory=lambda: dict(_DEFAULT_RATES))
    comm_params: CommModelParams = CommModelParams(C=0.001, D=100.0)
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.launch_overhead_us <= 0 or self.mem_us_per_byte <= 0:
            raise InvalidConfig("launch overhead and memory rate must be > 0")
        if not (0 <= self.noise <= 0.5):
            raise InvalidConfig("noise fraction must lie in [0, 0.5]")

    def rate(self, op_code: str) -> float:
        return self.compute_rates.get(op_code, _DEFAULT_RATE)


@dataclass(frozen=True)
class WorkloadSpec:
    family: str = "chain"
    op_count: int = 20
    tensor_count: int = 4
    min_tensor_bytes: int = 4 * 1024
    max_tensor_bytes: int = 64 * 1024 * 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfig(f"family must be one of {FAMILIES}")
        if self.op_count < 1:
            raise InvalidConfig("op_count must be >= 1")
        if self.tensor_count < 0:
            raise InvalidConfig("tensor_count must be >= 0")
        if not (0 < self.min_tensor_bytes <= self.max_tensor_bytes):
            raise InvalidConfig("bad tensor byte range")


def _log_uniform(rng: random.Random, lo: int, hi: int) -> int:
    if lo == hi:
        return lo
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


_FAMILY_CODES = {
    "chain": ["Conv2D", "ReLU", "Conv2D", "ReLU", "MatMul"],
    "residual": ["Conv2D", "BatchNorm", "ReLU", "Add"],
    "attention": ["MatMul", "MatMul", "MatMul", "Softmax", "MatMul", "LayerNorm"],
    "recurrent": ["Mul", "Sigmoid", "Mul", "Tanh"],
}


def _forward_edges(family: str, n: int) -> list[tuple[int, int]]:
    """FP topology motifs per family, over node indices 0..n-1."""
    edges = [(i - 1, i) for i in range(1, n)]
    if family == "residual":
        for a in range(0, n - 3, 3):
            edges.append((a, a + 3))
    elif family == "attention":
        # Per block of 6: x feeds q/k/v in parallel, scores join q and k,
        # output joins scores and v.
        for a in range(0, n - 5, 6):
            x, q, k, v, s, o = a, a + 1, a + 2, a + 3, a + 4, a + 5
            edges = [e for e in edges if e not in {(q, k), (k, v), (v, s)}]
            edges += [(x, k), (x, v), (q, s), (k, s), (v, o)]
    elif family == "recurrent":
        # Gate reuse: cell input also feeds the second multiply.
        for a in range(0, n - 3, 4):
            edges.append((a, a + 3))
    return sorted(set(edges))


def gen_workload(spec: WorkloadSpec, hw: Optional[HardwareParams] = None) -> HloGraph:
    """Deterministic synthetic iteration graph: FP ops, mirrored BP ops,
    one dedicated gradient producer + AllReduce + update op per gradient
    tensor."""
    hw = hw or HardwareParams()
    rng = random.Random(spec.seed)

    budget = spec.op_count
    tensors = spec.tensor_count
    # Each tensor needs a gradient producer and an update op, plus at
    # least one FP and one BP op to hang off.
    while tensors > 0 and budget - 2 * tensors < 2:
        tensors -= 1
    rest = budget - 2 * tensors
    n_fp = max(1, (rest + 1) // 2)
    n_bp = rest - n_fp

    codes = _FAMILY_CODES[spec.family]
    ops: list[OpNode] = []
    edges: list[DataEdge] = []
    out_bytes: dict[int, int] = {}

    for i in range(n_fp):
        out_bytes[i] = _log_uniform(rng, 1024, 4 * 1024 * 1024)
    fp_edges = _forward_edges(spec.family, n_fp)

    def mk_op(op_id: int, code: str, nbytes: int, in_total: int) -> OpNode:
        compute = max(0.1, hw.rate(code) * (max(nbytes, in_total) / 1024.0))
        key = f"s{in_total}x{nbytes}"
        return OpNode(
            id=op_id,
            op_code=code,
            kind=KIND_COMPUTE,
            input_shape_key=key,
            out_bytes=nbytes,
            compute_us=round(compute, 3),
        )

    in_totals = {i: 0 for i in range(n_fp)}
    for u, v in fp_edges:
        in_totals[v] += out_bytes[u]
    for i in range(n_fp):
        ops.append(mk_op(i, codes[i % len(codes)], out_bytes[i], in_totals[i]))
    for u, v in fp_edges:
        edges.append(DataEdge(u, v, out_bytes[u]))

    # BP mirror: bp_j replays fp op (n_fp-1-j) with equal compute;
    # gradient edges reverse the forward edges.
    bp_of = {}
    for j in range(n_bp):
        fp_i = n_fp - 1 - j
        bp_of[fp_i] = n_fp + j
    bp_in: dict[int, int] = {bp: 0 for bp in bp_of.values()}
    bp_edges: list[tuple[int, int, int]] = []
    for u, v in fp_edges:
        if u in bp_of and v in bp_of:
            bp_edges.append((bp_of[v], bp_of[u], out_bytes[u]))
            bp_in[bp_of[u]] += out_bytes[u]
    if n_bp > 0:
        # Loss boundary: the last FP op seeds the first BP op.
        seed_bytes = out_bytes[n_fp - 1]
        bp_edges.append((n_fp - 1, n_fp, seed_bytes))
        bp_in[n_fp] += seed_bytes
    for fp_i, bp_id in sorted(bp_of.items(), key=lambda kv: kv[1]):
        fp_op = ops[fp_i]
        nbytes = out_bytes[fp_i]
        # BP compute is copied from the forward op, so the shape key must
        # carry it for the profile to be a function of the key.
        key = f"g{bp_in[bp_id]}x{nbytes}c{fp_op.compute_us}"
        ops.append(
            OpNode(
                id=bp_id,
                op_code=fp_op.op_code,
                kind=KIND_COMPUTE,
                input_shape_key=key,
                out_bytes=nbytes,
                compute_us=fp_op.compute_us,
            )
        )
    for u, v, b in bp_edges:
        edges.append(DataEdge(u, v, b))

    allreduces: list[tuple[int, int, int]] = []
    next_id = n_fp + n_bp
    bp_ids = sorted(bp_of.values())
    for t in range(tensors):
        anchor = rng.choice(bp_ids)
        anchor_bytes = out_bytes[n_fp - 1 - (anchor - n_fp)]
        nbytes = _log_uniform(rng, spec.min_tensor_bytes, spec.max_tensor_bytes)
        grad_id = next_id
        upd_id = next_id + 1
        next_id += 2
        grad_compute = max(0.1, hw.rate("GradW") * (nbytes / 1024.0))
        ops.append(
            OpNode(
                id=grad_id,
                op_code="GradW",
                kind=KIND_COMPUTE,
                input_shape_key=f"w{anchor_bytes}x{nbytes}",
                out_bytes=nbytes,
                compute_us=round(grad_compute, 3),
            )
        )
        ops.append(
            OpNode(
                id=upd_id,
                op_code="ApplyGrad",
                kind=KIND_COMPUTE,
                input_shape_key=f"u{nbytes}",
                out_bytes=nbytes,
                compute_us=1.0,
            )
        )
        edges.append(DataEdge(anchor, grad_id, anchor_bytes))
        edges.append(DataEdge(grad_id, upd_id, nbytes))
        allreduces.append((t, grad_id, nbytes))

    meta = GraphMeta(name=f"{spec.family}-{spec.op_count}", devices=2, seed=spec.seed)
    return build_graph(ops, edges, allreduces, meta=meta)


# ---------------------------------------------------------------------------
# Oracle


def _jitter(hw: HardwareParams, payload: str) -> float:
    """Deterministic multiplicative jitter in [1-noise, 1+noise]."""
    if hw.noise == 0:
        return 1.0
    digest = hashlib.blake2b(
        f"{hw.seed}|{payload}".encode(), digest_size=8
    ).digest()
    u = int.from_bytes(digest, "little") / float(2**64)
    return 1.0 + hw.noise * (2.0 * u - 1.0)


def _group_content_key(g: HloGraph, group: FusionGroup) -> str:
    parts = []
    for m in sorted(group.member_ops):
        op = g.op(m)
        parts.append(f"{op.op_code}:{op.input_shape_key}:{op.compute_us}")
    io = group_io(g, group.id)
    return ";".join(parts) + f"|{io.internal_bytes},{io.external_in_bytes},{io.external_out_bytes}"


def oracle_time(g: HloGraph, group: FusionGroup, hw: HardwareParams) -> float:
    """Ground-truth group execution time: member compute plus one launch
    plus memory traffic for external bytes. Parameter groups cost
    nothing. Jitter, when enabled, is a pure function of the group's
    content so repeated measurements agree."""
    ops = [g.op(m) for m in sorted(group.member_ops)]
    if all(op.kind == "parameter" for op in ops):
        return 0.0
    compute = sum(op.compute_us or 0.0 for op in ops)
    io = group_io(g, group.id)
    base = (
        compute
        + hw.launch_overhead_us
        + hw.mem_us_per_byte * (io.external_in_bytes + io.external_out_bytes)
    )
    return base * _jitter(hw, _group_content_key(g, group))


def oracle_providers(hw: HardwareParams) -> CostProviders:
    """Ground-truth cost providers: the oracle for groups and the
    configured linear model for buckets."""

    def op_cost(g: HloGraph, group: FusionGroup) -> float:
        return oracle_time(g, group, hw)

    def comm_cost(g: HloGraph, bucket) -> float:
        return comm_predict(hw.comm_params, bucket.total_bytes)

    return CostProviders(op_cost=op_cost, comm_cost=comm_cost)


def make_profile(g: HloGraph, hw: HardwareParams) -> tuple[Profile, list[CommSample]]:
    """Profiler stand-in: oracle singleton times per (op_code, shape)
    key, plus comm measurements at the graph's tensor sizes."""
    probe = build_graph(
        g.ops,
        g.edges,
        [(ar.id, ar.producer_op, ar.tensor_bytes) for ar in g.allreduces],
        meta=g.meta,
    )
    times: dict[tuple[str, str], float] = {}
    for op in g.ops:
        if op.kind == "parameter":
            continue
        key = (op.op_code, op.input_shape_key)
        if key in times:
            continue
        times[key] = oracle_time(probe, probe.group(op.id), hw)
    samples = []
    for i, ar in enumerate(sorted(g.allreduces, key=lambda a: a.id)):
        base = comm_predict(hw.comm_params, ar.tensor_bytes)
        measured = base * _jitter(hw, f"comm{i}:{ar.tensor_bytes}")
        samples.append(CommSample(ar.tensor_bytes, measured))
    return Profile(times), samples


# ---------------------------------------------------------------------------
# Training-sample generation


def gen_training_samples(
    g: HloGraph,
    count: int,
    fusion_range: tuple[int, int],
    hw: HardwareParams,
    seed: int,
) -> list[tuple[SubgraphFeatures, float]]:
    """Build fused-op samples: pick an op, fuse it with a predecessor,
    then keep fusing the grown group with random predecessors N times
    (N drawn from ``fusion_range``). Labels come from the oracle."""
    lo, hi = fusion_range
    if count < 1:
        raise InvalidConfig("count must be >= 1")
    if not (1 <= lo <= hi):
        raise InvalidConfig("fusion range must satisfy 1 <= min <= max")
    profile, _ = make_profile(g, hw)
    rng = random.Random(seed)
    base = g
    if not fusible_pairs(base):
        return []
    samples: list[tuple[SubgraphFeatures, float]] = []
    while len(samples) < count:
        n = rng.randint(lo, hi)
        current = base
        grown: Optional[int] = None
        for _ in range(n):
            pairs = fusible_pairs(current)
            if grown is not None:
                pairs = [(gid, pred) for gid, pred in pairs if gid == grown]
            if not pairs:
                break
            gid, pred = pairs[rng.randrange(len(pairs))]
            outcome = fuse_nondup(current, gid, pred)
            if not outcome.applied:
                continue
            current = outcome.graph
            grown = min(gid, pred)
        if grown is None:
            continue
        group = current.group(grown)
        feats = featurize(current, group, profile)
        samples.append((feats, oracle_time(current, group, hw)))
    return samples
