import json
import random

import pytest

from conftest import chain, diamond, op, random_dag
from fuseopt.errors import CycleError, GraphFormatError, MissingCost
from fuseopt.graph import (
    DataEdge,
    FusionGroup,
    HloGraph,
    build_graph,
    canonical_hash,
    graph_from_doc,
    graph_to_doc,
    group_io,
    load_graph,
    module_stats,
    save_graph,
    topo_order,
    validate_module,
)


def test_empty_graph_is_valid():
    g = build_graph([], [], [])
    assert validate_module(g).ok


def test_fused_chain_is_valid():
    g = chain(2)
    g2 = build_graph(g.ops, g.edges, groups=[FusionGroup(0, frozenset({0, 1}))])
    assert validate_module(g2).ok


def test_diamond_skip_group_rejected():
    # Hand-check: contracting {0, 3} gives nodes {03}, {1}, {2} with
    # edges 03->1, 1->03, 03->2, 2->03: cyclic. The member set is also
    # disconnected (no 0-3 edge).
    g = diamond()
    g2 = build_graph(
        g.ops,
        g.edges,
        groups=[
            FusionGroup(0, frozenset({0, 3})),
            FusionGroup(1, frozenset({1})),
            FusionGroup(2, frozenset({2})),
        ],
    )
    report = validate_module(g2)
    assert not report.ok
    text = " ".join(report.violations)
    assert "connected" in text or "cyclic" in text


def test_parameter_in_multiop_group_rejected():
    ops = [op(0, kind="parameter", us=None), op(1)]
    g = build_graph(ops, [DataEdge(0, 1, 10)])
    g2 = build_graph(ops, g.edges, groups=[FusionGroup(0, frozenset({0, 1}))])
    report = validate_module(g2)
    assert not report.ok
    assert any("multi-op group" in v for v in report.violations)


def test_missing_allreduce_producer_rejected():
    g = build_graph([op(0)], [], [(0, 5, 1024)])
    report = validate_module(g)
    assert not report.ok
    assert any("producer" in v for v in report.violations)


def test_op_in_two_normal_groups_rejected():
    ops = [op(0), op(1)]
    g = build_graph(
        ops,
        [DataEdge(0, 1, 1)],
        groups=[FusionGroup(0, frozenset({0, 1})), FusionGroup(1, frozenset({1}))],
    )
    report = validate_module(g)
    assert not report.ok


def test_bucket_total_must_match():
    g = chain(2, allreduces=[(0, 1, 500)])
    bad = HloGraph(
        g.meta,
        g.ops,
        g.edges,
        g.allreduces,
        g.groups,
        tuple(b.__class__(b.id, b.members, b.total_bytes + 1) for b in g.buckets),
    )
    report = validate_module(bad)
    assert not report.ok
    assert any("total_bytes" in v for v in report.violations)


# --- topo_order -------------------------------------------------------------


def test_topo_chain():
    assert topo_order(chain(3)) == [0, 1, 2]


def test_topo_tiebreak_by_id():
    g = build_graph([op(7), op(3)])
    assert topo_order(g) == [3, 7]


def test_topo_diamond_with_fused_middle():
    # Contracted graph is the 3-chain {0} -> {1,2} -> {3}.
    g = diamond()
    g2 = build_graph(
        g.ops,
        g.edges,
        groups=[
            FusionGroup(0, frozenset({0})),
            FusionGroup(1, frozenset({1, 2})),
            FusionGroup(3, frozenset({3})),
        ],
    )
    assert topo_order(g2) == [0, 1, 3]


def test_topo_raises_on_cycle():
    g = diamond()
    g2 = build_graph(
        g.ops,
        g.edges,
        groups=[
            FusionGroup(0, frozenset({0, 3})),
            FusionGroup(1, frozenset({1})),
            FusionGroup(2, frozenset({2})),
        ],
    )
    with pytest.raises(CycleError):
        topo_order(g2)


# --- canonical_hash ---------------------------------------------------------


def test_hash_ignores_internal_ordering():
    g = chain(3, allreduces=[(0, 2, 4096)])
    reordered = HloGraph(
        g.meta,
        tuple(reversed(g.ops)),
        tuple(reversed(g.edges)),
        g.allreduces,
        tuple(reversed(g.groups)),
        g.buckets,
    )
    assert canonical_hash(g) == canonical_hash(reordered)


def test_hash_changes_after_fusion():
    g = chain(2)
    fused = build_graph(g.ops, g.edges, groups=[FusionGroup(0, frozenset({0, 1}))])
    assert canonical_hash(g) != canonical_hash(fused)


def test_hash_ignores_group_and_bucket_ids():
    g = chain(2, allreduces=[(0, 1, 100)])
    renamed = build_graph(
        g.ops,
        g.edges,
        [(0, 1, 100)],
        groups=[FusionGroup(10, frozenset({0})), FusionGroup(11, frozenset({1}))],
        buckets=[(5, (0,))],
    )
    assert canonical_hash(g) == canonical_hash(renamed)


def test_hash_permutation_invariant_quantified():
    rng = random.Random(7)
    g = random_dag(rng, n_ops=10, n_tensors=3)
    baseline = canonical_hash(g)
    for _ in range(100):
        ops = list(g.ops)
        edges = list(g.edges)
        groups = list(g.groups)
        buckets = list(g.buckets)
        ars = list(g.allreduces)
        for part in (ops, edges, groups, buckets, ars):
            rng.shuffle(part)
        shuffled = HloGraph(
            g.meta, tuple(ops), tuple(edges), tuple(ars), tuple(groups), tuple(buckets)
        )
        assert canonical_hash(shuffled) == baseline


def test_structurally_identical_graphs_hash_equal():
    def build(order):
        ops = [op(i, us=float(i + 1)) for i in order]
        edges = [DataEdge(0, 1, 10), DataEdge(1, 2, 20)]
        random.Random(order[0]).shuffle(edges)
        return build_graph(ops, edges, [(0, 2, 512)])

    assert canonical_hash(build([0, 1, 2])) == canonical_hash(build([2, 0, 1]))


# --- module_stats -----------------------------------------------------------


def test_stats_single_op_single_allreduce():
    g = chain(1, allreduces=[(0, 0, 100)])
    stats = module_stats(g, {0: 10.0}, {0: 4.0})
    assert stats == (10.0, 4.0, 1, 1)


def test_stats_no_comm():
    g = chain(2)
    stats = module_stats(g, {0: 1.0, 1: 2.0}, {})
    assert stats.total_comm_us == 0.0


def test_stats_sums():
    g = chain(3, allreduces=[(0, 1, 10), (1, 2, 10)])
    stats = module_stats(g, {0: 5.0, 1: 7.0, 2: 9.0}, {0: 2.0, 1: 3.0})
    assert stats == (21.0, 5.0, 3, 2)


def test_stats_missing_cost():
    g = chain(2)
    with pytest.raises(MissingCost):
        module_stats(g, {0: 5.0}, {})


# --- group_io ---------------------------------------------------------------


def test_group_io_singleton():
    g = chain(2, out=1000)
    io = group_io(g, 0)
    assert io.internal_bytes == 0
    assert io.external_in_bytes == 0
    assert io.external_out_bytes == 1000
    io1 = group_io(g, 1)
    assert io1.external_in_bytes == 1000


def test_group_io_fused_chain():
    g = chain(2, out=1000)
    fused = build_graph(g.ops, g.edges, groups=[FusionGroup(0, frozenset({0, 1}))])
    io = group_io(fused, 0)
    assert io.internal_bytes == 1000
    assert io.external_in_bytes == 0
    # Only op 1's output leaves the group; op 0's stays on chip.
    assert io.external_out_bytes == 1000


def test_group_io_allreduce_output_always_materialized():
    g = chain(2, out=1000, allreduces=[(0, 0, 777)])
    fused = build_graph(
        g.ops, g.edges, [(0, 0, 777)], groups=[FusionGroup(0, frozenset({0, 1}))]
    )
    io = group_io(fused, 0)
    # op 0 feeds the AllReduce, so its tensor is written even though its
    # only edge is internal.
    assert io.external_out_bytes == 2000


# --- file format ------------------------------------------------------------


def test_graph_roundtrip(tmp_path):
    g = random_dag(random.Random(3), n_ops=9, n_tensors=2)
    path = tmp_path / "g.json"
    save_graph(path, g)
    g2 = load_graph(path)
    assert canonical_hash(g) == canonical_hash(g2)
    assert validate_module(g2).ok


def test_graph_roundtrip_with_fusion_state(tmp_path):
    g = chain(3, allreduces=[(0, 1, 10), (1, 2, 20)])
    fused = build_graph(
        g.ops,
        g.edges,
        [(0, 1, 10), (1, 2, 20)],
        groups=[FusionGroup(0, frozenset({0, 1})), FusionGroup(2, frozenset({2}))],
        buckets=[(0, (0, 1))],
    )
    path = tmp_path / "g.json"
    save_graph(path, fused)
    g2 = load_graph(path)
    assert canonical_hash(fused) == canonical_hash(g2)
    assert len(g2.buckets) == 1
    assert g2.buckets[0].total_bytes == 30


def test_unknown_top_level_key_rejected():
    with pytest.raises(GraphFormatError):
        graph_from_doc({"meta": {}, "ops": [], "extra": 1})


def test_unknown_op_key_rejected():
    with pytest.raises(GraphFormatError):
        graph_from_doc({"ops": [{"id": 0, "op_code": "Mul", "weird": True}]})


def test_doc_defaults_to_unfused():
    doc = {
        "meta": {"name": "t", "devices": 4, "seed": 9},
        "ops": [
            {"id": 0, "op_code": "Mul", "kind": "compute", "out_bytes": 10},
            {"id": 1, "op_code": "Mul", "kind": "compute", "out_bytes": 10},
        ],
        "edges": [{"src": 0, "dst": 1, "bytes": 10}],
        "allreduce": [{"id": 0, "producer_op": 1, "tensor_bytes": 10}],
    }
    g = graph_from_doc(doc)
    assert len(g.groups) == 2 and len(g.buckets) == 1
    assert g.meta.devices == 4
    roundtrip = graph_from_doc(graph_to_doc(g))
    assert canonical_hash(g) == canonical_hash(roundtrip)


def test_partition_property_random_graphs():
    rng = random.Random(11)
    for _ in range(20):
        g = random_dag(rng, n_ops=rng.randrange(1, 12), n_tensors=rng.randrange(0, 3))
        report = validate_module(g)
        assert report.ok, report.violations
        normal_memberships = sum(
            1
            for gr in g.groups
            for m in gr.member_ops
            if m not in gr.duplicated_ops
        )
        assert normal_memberships == len(g.ops)
        bucket_members = sum(len(b.members) for b in g.buckets)
        assert bucket_members == len(g.allreduces)
