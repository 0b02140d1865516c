import random

import pytest

from conftest import op
from fuseopt.comm import fit
from fuseopt.estimator import lookup
from fuseopt.graph import (
    DataEdge,
    FusionGroup,
    build_graph,
    canonical_hash,
    validate_module,
)
from fuseopt.rewrite import fuse_nondup, fusible_pairs
from fuseopt.simulator import simulate
from fuseopt.workloads import (
    FAMILIES,
    HardwareParams,
    WorkloadSpec,
    gen_training_samples,
    gen_workload,
    make_profile,
    oracle_providers,
    oracle_time,
)

KB = 1024


def hw(**kw):
    return HardwareParams(**kw)


# --- gen_workload -----------------------------------------------------------


def test_single_op_chain():
    g = gen_workload(WorkloadSpec(family="chain", op_count=1, tensor_count=0))
    assert len(g.ops) == 1
    assert len(g.allreduces) == 0
    assert validate_module(g).ok


def test_all_families_valid_and_sized():
    for family in FAMILIES:
        for ops_n, tensors in ((10, 2), (37, 5), (80, 12)):
            spec = WorkloadSpec(family=family, op_count=ops_n, tensor_count=tensors, seed=3)
            g = gen_workload(spec)
            report = validate_module(g)
            assert report.ok, (family, report.violations)
            assert len(g.ops) == ops_n
            assert len(g.allreduces) == tensors


def test_residual_has_diamond_motif():
    g = gen_workload(WorkloadSpec(family="residual", op_count=20, tensor_count=0))
    # A skip edge (u, v) plus a longer u -> ... -> v path.
    direct = {(e.src, e.dst) for e in g.edges}
    succs = {}
    for e in g.edges:
        succs.setdefault(e.src, set()).add(e.dst)
    found = False
    for u, v in direct:
        stack = [w for w in succs.get(u, ()) if w != v]
        seen = set(stack)
        while stack:
            x = stack.pop()
            if x == v:
                found = True
                break
            for y in succs.get(x, ()):
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        if found:
            break
    assert found


def test_workload_deterministic():
    spec = WorkloadSpec(family="attention", op_count=40, tensor_count=6, seed=12)
    assert canonical_hash(gen_workload(spec)) == canonical_hash(gen_workload(spec))


def test_updates_depend_on_allreduce():
    g = gen_workload(WorkloadSpec(family="chain", op_count=12, tensor_count=2, seed=1))
    cp = oracle_providers(hw())
    tl = simulate(g, cp)
    comm_end = {bid: e for bid, _, e in tl.comm_events}
    upd_ids = {o.id for o in g.ops if o.op_code == "ApplyGrad"}
    for ar in g.allreduces:
        upd = next(
            e.dst for e in g.edges if e.src == ar.producer_op and e.dst in upd_ids
        )
        gid = g.index.normal_group_of[upd]
        start = next(s for gg, s, _ in tl.compute_events if gg == gid)
        assert start >= comm_end[ar.bucket] - 1e-9


# --- oracle -------------------------------------------------------------------


def test_oracle_singleton_worked_example():
    # compute 100, launch 5, in 10 KB, out 20 KB at 1 us/KB -> 135.
    ops = [
        op(0, code="Src", out=10 * KB, us=1.0),
        op(1, code="Mul", out=20 * KB, us=100.0),
    ]
    g = build_graph(ops, [DataEdge(0, 1, 10 * KB)])
    t = oracle_time(g, g.group(1), hw(launch_overhead_us=5.0, mem_us_per_byte=1.0 / KB))
    assert t == pytest.approx(135.0)


def test_oracle_fused_matches_estimator_example():
    ops = [
        op(0, code="Src", out=10 * KB, us=1.0, key="s"),
        op(1, code="Mul", out=50 * KB, us=100.0, key="m1"),
        op(2, code="Mul", out=20 * KB, us=200.0, key="m2"),
    ]
    edges = [DataEdge(0, 1, 10 * KB), DataEdge(1, 2, 50 * KB)]
    params = hw(launch_overhead_us=5.0, mem_us_per_byte=1.0 / KB)
    g = build_graph(ops, edges)
    unfused = oracle_time(g, g.group(1), params) + oracle_time(g, g.group(2), params)
    assert unfused == pytest.approx(440.0)
    fused = build_graph(
        g.ops,
        g.edges,
        groups=[FusionGroup(0, frozenset({0})), FusionGroup(1, frozenset({1, 2}))],
    )
    assert oracle_time(fused, fused.group(1), params) == pytest.approx(335.0)


def test_oracle_deterministic_with_and_without_noise():
    g = gen_workload(WorkloadSpec(op_count=10, tensor_count=2, seed=4))
    for noise in (0.0, 0.05):
        params = hw(noise=noise, seed=77)
        a = oracle_time(g, g.groups[0], params)
        b = oracle_time(g, g.groups[0], params)
        assert a == b
    base = oracle_time(g, g.groups[0], hw(noise=0.0))
    jittered = oracle_time(g, g.groups[0], hw(noise=0.05, seed=77))
    assert abs(jittered / base - 1.0) <= 0.05 + 1e-12


def test_oracle_subadditive_for_nondup_fusion():
    rng = random.Random(6)
    params = hw()
    merges = 0
    while merges < 1000:
        g = gen_workload(
            WorkloadSpec(
                family=rng.choice(FAMILIES),
                op_count=rng.randrange(6, 25),
                tensor_count=rng.randrange(0, 4),
                seed=rng.randrange(10**6),
            )
        )
        pairs = fusible_pairs(g)
        rng.shuffle(pairs)
        for gid, pred in pairs[:10]:
            before_a = oracle_time(g, g.group(gid), params)
            before_b = oracle_time(g, g.group(pred), params)
            out = fuse_nondup(g, gid, pred)
            if not out.applied:
                continue
            merged_gid = min(gid, pred)
            after = oracle_time(out.graph, out.graph.group(merged_gid), params)
            assert after <= before_a + before_b + 1e-9
            merges += 1


# --- make_profile ---------------------------------------------------------------


def test_profile_matches_oracle_singletons():
    g = gen_workload(WorkloadSpec(op_count=20, tensor_count=3, seed=8))
    params = hw(noise=0.05, seed=3)
    profile, _ = make_profile(g, params)
    for o in g.ops:
        assert lookup(profile, o) == oracle_time(g, g.group(o.id), params)


def test_profile_covers_simulation():
    g = gen_workload(WorkloadSpec(op_count=30, tensor_count=4, seed=9))
    params = hw()
    profile, _ = make_profile(g, params)
    from fuseopt.estimator import make_cost_providers

    cp = make_cost_providers(profile, params.comm_params)
    tl = simulate(g, cp)  # no UnknownOp
    assert tl.makespan_us > 0


def test_comm_samples_refit_recovers_params():
    g = gen_workload(WorkloadSpec(op_count=30, tensor_count=8, seed=10))
    params = hw()
    profile, samples = make_profile(g, params)
    fitted = fit(samples)
    assert fitted.C == pytest.approx(params.comm_params.C, rel=0.02)
    assert fitted.D == pytest.approx(params.comm_params.D, rel=0.02)


# --- gen_training_samples --------------------------------------------------------


def test_samples_two_op_chain():
    ops = [op(0, us=10.0, key="a"), op(1, us=20.0, key="b")]
    g = build_graph(ops, [DataEdge(0, 1, 100)])
    out = gen_training_samples(g, 1, (1, 1), hw(), seed=0)
    assert len(out) == 1
    feats, label = out[0]
    assert feats.member_count == 2
    assert label > 0


def test_samples_requested_count_and_positive_labels():
    g = gen_workload(WorkloadSpec(op_count=60, tensor_count=8, seed=11))
    out = gen_training_samples(g, 300, (1, 10), hw(), seed=5)
    assert len(out) == 300
    assert all(label > 0 for _, label in out)
    assert any(f.member_count > 2 for f, _ in out)


def test_samples_deterministic():
    g = gen_workload(WorkloadSpec(op_count=30, tensor_count=4, seed=12))
    a = gen_training_samples(g, 40, (1, 6), hw(), seed=9)
    b = gen_training_samples(g, 40, (1, 6), hw(), seed=9)
    assert [(f.op_codes, f.edges, l) for f, l in a] == [
        (f.op_codes, f.edges, l) for f, l in b
    ]


def test_samples_unfusible_graph_returns_empty():
    g = build_graph([op(0)])
    assert gen_training_samples(g, 5, (1, 3), hw(), seed=0) == []
