import random

import pytest

from conftest import chain, diamond, fixed_costs, op, random_dag
from fuseopt.errors import NotNeighbors
from fuseopt.graph import (
    DataEdge,
    build_graph,
    canonical_hash,
    validate_module,
)
from fuseopt.rewrite import (
    OptimizationMethod,
    fuse_allreduce,
    fuse_dup,
    fuse_nondup,
    neighbors_allreduce,
    random_apply,
)
from fuseopt.simulator import simulate


def start_of(tl, gid):
    return next(s for g, s, _ in tl.compute_events if g == gid)


def comm_start(tl, bid):
    return next(s for b, s, _ in tl.comm_events if b == bid)


# --- fuse_nondup ------------------------------------------------------------


def test_nondup_chain():
    g = chain(2)
    out = fuse_nondup(g, 1, 0)
    assert out.applied
    assert len(out.graph.groups) == 1
    assert out.graph.groups[0].member_ops == {0, 1}


def test_nondup_other_consumer_waits_for_merged_group():
    # 0 -> 1, 0 -> 2; fusing 1 with 0 makes 2 wait for the merged kernel.
    ops = [op(0, us=10.0), op(1, us=20.0), op(2, us=5.0)]
    edges = [DataEdge(0, 1, 100), DataEdge(0, 2, 100)]
    g = build_graph(ops, edges)
    out = fuse_nondup(g, 1, 0)
    assert out.applied
    tl = simulate(out.graph, fixed_costs())
    merged_gid = out.graph.index.normal_group_of[0]
    merged_end = next(e for gid, _, e in tl.compute_events if gid == merged_gid)
    assert start_of(tl, out.graph.index.normal_group_of[2]) == merged_end == 30.0


def test_nondup_rejects_cycle_via_alternate_path():
    # Diamond 0->1->3, 0->2->3. Fuse 3 with 1 is fine; then fusing 0 into
    # {1,3} while 2 sits on the alternate path contracts to a 2-cycle.
    g = diamond()
    out = fuse_nondup(g, 3, 1)
    assert out.applied
    merged = out.graph.index.normal_group_of[3]
    again = fuse_nondup(out.graph, merged, 0)
    assert not again.applied
    assert canonical_hash(again.graph) == canonical_hash(out.graph)
    # Fusing 2 into {1,3} is legal: 2 also feeds 3 directly.
    ok = fuse_nondup(out.graph, merged, 2)
    assert ok.applied
    assert validate_module(ok.graph).ok


def test_nondup_rejects_parameter_member():
    ops = [op(0, kind="parameter", us=None), op(1)]
    g = build_graph(ops, [DataEdge(0, 1, 10)])
    out = fuse_nondup(g, 1, 0)
    assert not out.applied
    assert "parameter" in out.description


def test_nondup_requires_adjacency():
    g = chain(3)
    out = fuse_nondup(g, 2, 0)
    assert not out.applied


# --- fuse_dup ---------------------------------------------------------------


def test_dup_fanout_creates_replica():
    # 0 -> {1, 2}; dup-fuse(1, 0) gives groups {0,1} and a replica {0'}
    # feeding 2.
    ops = [op(0, us=10.0), op(1, us=20.0), op(2, us=5.0)]
    edges = [DataEdge(0, 1, 100), DataEdge(0, 2, 100)]
    g = build_graph(ops, edges)
    out = fuse_dup(g, 1, 0)
    assert out.applied
    groups = {frozenset(gr.member_ops): gr for gr in out.graph.groups}
    assert frozenset({0, 1}) in groups
    replica = out.graph.index.replica_group_of[0]
    assert out.graph.group(replica).duplicated_ops == {0}
    # 2 starts when the replica finishes, not when {0,1} does.
    tl = simulate(out.graph, fixed_costs())
    replica_end = next(e for gid, _, e in tl.compute_events if gid == replica)
    assert start_of(tl, out.graph.index.normal_group_of[2]) == replica_end
    # Total compute grew by exactly the duplicated op's time.
    assert sum(e - s for _, s, e in tl.compute_events) == 10.0 + 20.0 + 5.0 + 10.0


def test_dup_single_consumer_degrades_to_nondup():
    g = chain(2)
    out = fuse_dup(g, 1, 0)
    assert out.applied
    assert len(out.graph.groups) == 1
    assert not out.graph.groups[0].duplicated_ops
    assert canonical_hash(out.graph) == canonical_hash(fuse_nondup(g, 1, 0).graph)


def test_dup_allreduce_attaches_to_replica():
    # Gradient producer 0 with AllReduce r feeds compute op 1. After
    # dup-fusion r starts at the replica's finish; without it r waits for
    # the merged group.
    ops = [op(0, us=10.0), op(1, us=20.0)]
    g = build_graph(ops, [DataEdge(0, 1, 100)], [(0, 0, 1000)])
    cp = fixed_costs(comm_us={0: 15.0})

    dup = fuse_dup(g, 1, 0)
    assert dup.applied
    replica = dup.graph.index.replica_group_of[0]
    tl = simulate(dup.graph, cp)
    replica_end = next(e for gid, _, e in tl.compute_events if gid == replica)
    assert comm_start(tl, 0) == replica_end == 10.0


def test_dup_rejects_predecessor_with_replica_members():
    ops = [op(0, us=10.0), op(1, us=20.0), op(2, us=5.0), op(3, us=5.0)]
    edges = [DataEdge(0, 1, 100), DataEdge(0, 2, 100), DataEdge(0, 3, 100)]
    g = build_graph(ops, edges)
    first = fuse_dup(g, 1, 0)
    assert first.applied
    replica = first.graph.index.replica_group_of[0]
    second = fuse_dup(first.graph, first.graph.index.normal_group_of[2], replica)
    assert not second.applied


# --- AllReduce neighbors and fusion ------------------------------------------


def test_neighbors_isolated_producer_empty():
    g = build_graph([op(0), op(1)], [], [(0, 0, 100), (1, 1, 100)])
    assert neighbors_allreduce(g, 0) == set()


def test_neighbors_chain():
    g = chain(2, allreduces=[(0, 0, 100), (1, 1, 100)])
    assert neighbors_allreduce(g, 0) == {1}
    assert neighbors_allreduce(g, 1) == {0}


def test_neighbor_relation_symmetric_random():
    rng = random.Random(23)
    for _ in range(20):
        g = random_dag(rng, n_ops=rng.randrange(3, 10), n_tensors=rng.randrange(2, 4))
        for b in g.buckets:
            for other in neighbors_allreduce(g, b.id):
                assert b.id in neighbors_allreduce(g, other)


def test_fuse_allreduce_merges_sizes():
    g = chain(2, allreduces=[(0, 0, 300), (1, 1, 200)])
    out = fuse_allreduce(g, 0, 1)
    assert out.applied
    assert len(out.graph.buckets) == 1
    assert out.graph.buckets[0].total_bytes == 500
    for ar in out.graph.allreduces:
        assert ar.bucket == out.graph.buckets[0].id


def test_fuse_allreduce_self_rejected():
    g = chain(2, allreduces=[(0, 0, 300), (1, 1, 200)])
    with pytest.raises(NotNeighbors):
        fuse_allreduce(g, 0, 0)


def test_fuse_allreduce_transitive_neighbors():
    # Chain p1 -> p2 -> p3 with tensors t0, t1, t2: after fusing t0 and
    # t1, t2 is a neighbor of the merged bucket through p2.
    g = chain(3, allreduces=[(0, 0, 100), (1, 1, 100), (2, 2, 100)])
    assert neighbors_allreduce(g, 0) == {1}
    out = fuse_allreduce(g, 0, 1)
    assert out.applied
    merged = out.graph.buckets[0].id if len(out.graph.buckets[0].members) == 2 else out.graph.buckets[1].id
    assert 2 in neighbors_allreduce(out.graph, merged)
    out2 = fuse_allreduce(out.graph, merged, 2)
    assert out2.applied
    assert len(out2.graph.buckets) == 1
    assert out2.graph.buckets[0].total_bytes == 300


def test_fuse_allreduce_not_neighbors_raises():
    g = build_graph([op(0), op(1)], [], [(0, 0, 100), (1, 1, 100)])
    with pytest.raises(NotNeighbors):
        fuse_allreduce(g, 0, 1)


def test_same_group_tensors_stay_neighbors():
    # Fusing the two producers must not remove the tensor fusion move.
    g = chain(2, allreduces=[(0, 0, 100), (1, 1, 100)])
    fused = fuse_nondup(g, 1, 0)
    assert fused.applied
    assert neighbors_allreduce(fused.graph, 0) == {1}
    merged = fuse_allreduce(fused.graph, 0, 1)
    assert merged.applied
    assert len(merged.graph.buckets) == 1


def test_update_cannot_fuse_into_its_producer():
    # The terminal consumer of an aggregated gradient waits on the
    # bucket, so pulling it into the producing group would deadlock and
    # the rewrite is rejected.
    ops = [op(0, us=10.0), op(1, code="ApplyGrad", us=1.0)]
    g = build_graph(ops, [DataEdge(0, 1, 100)], [(0, 0, 1000)])
    out = fuse_nondup(g, 1, 0)
    assert not out.applied
    assert "cyclic" in out.description


# --- conservation properties -------------------------------------------------


def _total_compute_work(g):
    # Each membership counts, so replicas are paid for again.
    return sum(
        g.op(m).compute_us or 0.0 for gr in g.groups for m in gr.member_ops
    )


def test_bucket_bytes_conserved_and_compute_totals():
    rng = random.Random(9)
    g = random_dag(rng, n_ops=8, n_tensors=3)
    total_bytes = sum(b.total_bytes for b in g.buckets)
    current = g
    for _ in range(30):
        method = rng.choice(list(OptimizationMethod))
        before_work = _total_compute_work(current)
        out = random_apply(current, method, 1, rng)
        after_work = _total_compute_work(out.graph)
        if method is OptimizationMethod.DUPLICATE_FUSION and out.applied:
            replicated = after_work - before_work
            assert replicated >= 0.0
        else:
            assert after_work == before_work
        current = out.graph
        assert sum(b.total_bytes for b in current.buckets) == total_bytes


def test_dup_increases_work_by_replica_compute():
    ops = [op(0, us=10.0), op(1, us=20.0), op(2, us=5.0)]
    edges = [DataEdge(0, 1, 100), DataEdge(0, 2, 100)]
    g = build_graph(ops, edges)
    out = fuse_dup(g, 1, 0)
    assert out.applied
    assert _total_compute_work(out.graph) == _total_compute_work(g) + 10.0


def test_random_rewrites_preserve_validity():
    # Quantified invariant: random rewrites on random graphs never
    # produce an invalid accepted state.
    rng = random.Random(42)
    total_rewrites = 0
    while total_rewrites < 10_000:
        g = random_dag(rng, n_ops=rng.randrange(4, 12), n_tensors=rng.randrange(0, 4))
        current = g
        for _ in range(25):
            method = rng.choice(list(OptimizationMethod))
            out = random_apply(current, method, 1, rng)
            total_rewrites += 1
            if out.applied:
                report = validate_module(out.graph)
                assert report.ok, report.violations
                current = out.graph
    assert total_rewrites >= 10_000


# --- random_apply ------------------------------------------------------------


def test_random_apply_zero_is_noop():
    g = chain(4)
    out = random_apply(g, OptimizationMethod.NON_DUPLICATE_FUSION, 0, random.Random(0))
    assert not out.applied
    assert out.graph is g


def test_random_apply_single_op_graph():
    g = chain(1)
    for method in OptimizationMethod:
        out = random_apply(g, method, 5, random.Random(0))
        assert not out.applied
        assert out.graph is g


def test_random_apply_deterministic():
    g = random_dag(random.Random(5), n_ops=10, n_tensors=3)
    a = random_apply(g, OptimizationMethod.NON_DUPLICATE_FUSION, 6, random.Random(42))
    b = random_apply(g, OptimizationMethod.NON_DUPLICATE_FUSION, 6, random.Random(42))
    assert canonical_hash(a.graph) == canonical_hash(b.graph)
    assert a.description == b.description
