"""Graph rewrites: the three optimization moves explored by the search
(merge a predecessor group into a consumer group with or without
duplication, and merge neighboring AllReduce buckets), plus the seeded
random applicator the search's inner loop uses.

Structurally illegal fusions (parameter/control members, contraction
cycles) are rejected by returning ``applied=False``; the input graph is
handed back untouched."""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

from .errors import NotNeighbors
from .graph import (
    KIND_COMPUTE,
    AllReduceInstr,
    FusionGroup,
    HloGraph,
    TensorBucket,
    rewrite_candidate_ok,
    with_fusion_state,
)


class OptimizationMethod(Enum):
    NON_DUPLICATE_FUSION = "nondup"
    DUPLICATE_FUSION = "dup"
    ALLREDUCE_FUSION = "ar"


@dataclass(frozen=True)
class RewriteOutcome:
    graph: HloGraph
    applied: bool
    description: str


def _rejected(g: HloGraph, why: str) -> RewriteOutcome:
    return RewriteOutcome(g, False, f"rejected: {why}")


def _all_compute(g: HloGraph, group: FusionGroup) -> bool:
    return all(g.op(m).kind == KIND_COMPUTE for m in group.member_ops)


def fusible_pairs(g: HloGraph) -> list[tuple[int, int]]:
    """(consumer group, predecessor group) pairs eligible for op fusion,
    in deterministic order. Only all-compute groups participate."""
    idx = g.index
    compute_ok = {gr.id: _all_compute(g, gr) for gr in g.groups}
    pairs = []
    for gid in sorted(idx.contracted_preds):
        if not compute_ok[gid]:
            continue
        for pred in sorted(idx.contracted_preds[gid]):
            if compute_ok[pred]:
                pairs.append((gid, pred))
    return pairs


def fuse_nondup(g: HloGraph, op_gid: int, pred_gid: int) -> RewriteOutcome:
    """Merge predecessor group into consumer group. Everything that read
    the predecessor's outputs now waits for the merged group."""
    idx = g.index
    op_group = g.group(op_gid)
    pred_group = g.group(pred_gid)
    if op_gid == pred_gid:
        return _rejected(g, "cannot fuse a group with itself")
    if pred_gid not in idx.contracted_preds[op_gid]:
        return _rejected(g, f"group {pred_gid} is not a direct predecessor of {op_gid}")
    if not (_all_compute(g, op_group) and _all_compute(g, pred_group)):
        return _rejected(g, "parameter or control op in fusion")
    if op_group.member_ops & pred_group.member_ops:
        # A replica group next to the group holding its original: the
        # merge would hold the same op twice.
        return _rejected(g, "groups share a member")
    merged = FusionGroup(
        id=min(op_gid, pred_gid),
        member_ops=op_group.member_ops | pred_group.member_ops,
        duplicated_ops=op_group.duplicated_ops | pred_group.duplicated_ops,
    )
    groups = [gr for gr in g.groups if gr.id not in (op_gid, pred_gid)]
    groups.append(merged)
    candidate = with_fusion_state(g, groups)
    ok, why = rewrite_candidate_ok(candidate)
    if not ok:
        return _rejected(g, why)
    return RewriteOutcome(
        candidate,
        True,
        f"nondup: group {pred_gid}{sorted(pred_group.member_ops)} into "
        f"group {op_gid}{sorted(op_group.member_ops)}",
    )


def fuse_dup(g: HloGraph, op_gid: int, pred_gid: int) -> RewriteOutcome:
    """Merge predecessor into consumer and leave a replica of the
    predecessor behind for its other consumers, so gradients and
    activations it feeds elsewhere are available without waiting for the
    merged group. With no other consumer the replica would be dead code
    and this degrades to non-duplicate fusion."""
    idx = g.index
    op_group = g.group(op_gid)
    pred_group = g.group(pred_gid)
    if op_gid == pred_gid:
        return _rejected(g, "cannot fuse a group with itself")
    if pred_gid not in idx.contracted_preds[op_gid]:
        return _rejected(g, f"group {pred_gid} is not a direct predecessor of {op_gid}")
    if not (_all_compute(g, op_group) and _all_compute(g, pred_group)):
        return _rejected(g, "parameter or control op in fusion")
    if op_group.member_ops & pred_group.member_ops:
        return _rejected(g, "groups share a member")
    if any(m in idx.replica_group_of for m in pred_group.member_ops):
        # Duplicating would hand some member a second replica membership.
        return _rejected(g, "a predecessor member already has a replica")

    other_consumers = idx.contracted_succs[pred_gid] - {op_gid}
    feeds_allreduce = any(
        m in idx.instrs_of_producer for m in pred_group.member_ops
    )
    if not other_consumers and not feeds_allreduce:
        outcome = fuse_nondup(g, op_gid, pred_gid)
        if outcome.applied:
            outcome = RewriteOutcome(
                outcome.graph, True, outcome.description.replace("nondup", "dup(degraded)", 1)
            )
        return outcome

    merged = FusionGroup(
        id=min(op_gid, pred_gid),
        member_ops=op_group.member_ops | pred_group.member_ops,
        duplicated_ops=op_group.duplicated_ops,
    )
    replica = FusionGroup(
        id=max(gr.id for gr in g.groups) + 1,
        member_ops=pred_group.member_ops,
        duplicated_ops=pred_group.member_ops,
    )
    groups = [gr for gr in g.groups if gr.id not in (op_gid, pred_gid)]
    groups += [merged, replica]
    candidate = with_fusion_state(g, groups)
    ok, why = rewrite_candidate_ok(candidate)
    if not ok:
        return _rejected(g, why)
    return RewriteOutcome(
        candidate,
        True,
        f"dup: group {pred_gid}{sorted(pred_group.member_ops)} into group "
        f"{op_gid}{sorted(op_group.member_ops)}, replica group {replica.id}",
    )


def neighbors_allreduce(g: HloGraph, bucket_id: int) -> set[int]:
    """Buckets whose producing groups touch this bucket's producing
    groups in the contracted graph. Tensors emitted by the same fused
    group count as neighbors too, so op fusion never removes tensor
    fusion opportunities."""
    idx = g.index
    bucket = g.bucket(bucket_id)
    own_groups = {
        idx.export_group(idx.instr_by_id[m].producer_op) for m in bucket.members
    }
    nearby: set[int] = set(own_groups)
    for gid in own_groups:
        nearby |= idx.contracted_succs[gid]
        nearby |= idx.contracted_preds[gid]
    out: set[int] = set()
    for b in g.buckets:
        if b.id == bucket_id:
            continue
        for m in b.members:
            if idx.export_group(idx.instr_by_id[m].producer_op) in nearby:
                out.add(b.id)
                break
    return out


def fuse_allreduce(g: HloGraph, bucket_id: int, neighbor_id: int) -> RewriteOutcome:
    """Merge two neighboring buckets into one transmission whose size is
    the exact sum; the merged AllReduce starts only after every member
    tensor is produced."""
    if neighbor_id not in neighbors_allreduce(g, bucket_id):
        raise NotNeighbors(f"bucket {neighbor_id} is not a neighbor of {bucket_id}")
    a = g.bucket(bucket_id)
    b = g.bucket(neighbor_id)
    merged_id = min(a.id, b.id)
    members = tuple(sorted(set(a.members) | set(b.members)))
    merged = TensorBucket(merged_id, members, a.total_bytes + b.total_bytes)
    buckets = [bk for bk in g.buckets if bk.id not in (a.id, b.id)]
    buckets.append(merged)
    instrs = tuple(
        AllReduceInstr(ar.id, ar.producer_op, ar.tensor_bytes, merged_id)
        if ar.id in members
        else ar
        for ar in g.allreduces
    )
    candidate = with_fusion_state(g, g.groups, buckets=buckets, allreduces=instrs)
    ok, why = rewrite_candidate_ok(candidate)
    if not ok:
        return _rejected(g, why)
    return RewriteOutcome(
        candidate,
        True,
        f"ar: bucket {neighbor_id}{sorted(b.members)} into bucket "
        f"{bucket_id}{sorted(a.members)}",
    )


def bucket_pairs(g: HloGraph) -> list[tuple[int, int]]:
    """(bucket, neighbor) pairs eligible for AllReduce fusion, in
    deterministic order."""
    pairs = []
    for b in sorted(bk.id for bk in g.buckets):
        for n in sorted(neighbors_allreduce(g, b)):
            pairs.append((b, n))
    return pairs


def random_apply(
    g: HloGraph,
    method: OptimizationMethod,
    n: int,
    rng: random.Random,
) -> RewriteOutcome:
    """Apply ``method`` up to ``n`` times, drawing the target and its
    predecessor/neighbor uniformly among the currently legal choices.
    Invalid draws are skipped, not redrawn. Deterministic given the rng
    state."""
    if n < 0:
        raise ValueError("n must be >= 0")
    current = g
    applied_any = False
    notes: list[str] = []
    for _ in range(n):
        if method is OptimizationMethod.ALLREDUCE_FUSION:
            choices = bucket_pairs(current)
        else:
            choices = fusible_pairs(current)
            if method is OptimizationMethod.DUPLICATE_FUSION:
                choices = [
                    (gid, pred)
                    for gid, pred in choices
                    if not current.group(pred).duplicated_ops
                ]
        if not choices:
            break
        target, other = choices[rng.randrange(len(choices))]
        if method is OptimizationMethod.NON_DUPLICATE_FUSION:
            outcome = fuse_nondup(current, target, other)
        elif method is OptimizationMethod.DUPLICATE_FUSION:
            outcome = fuse_dup(current, target, other)
        else:
            outcome = fuse_allreduce(current, target, other)
        if outcome.applied:
            current = outcome.graph
            applied_any = True
            notes.append(outcome.description)
    if not applied_any:
        return RewriteOutcome(g, False, f"{method.value}: no change")
    return RewriteOutcome(current, True, "; ".join(notes))
