import random

import pytest

from fuseopt.graph import DataEdge, OpNode, build_graph
from fuseopt.simulator import CostProviders


def op(i, code="Mul", kind="compute", out=1024, us=10.0, key=None):
    return OpNode(
        id=i,
        op_code=code,
        kind=kind,
        input_shape_key=key if key is not None else f"k{i}",
        out_bytes=out,
        compute_us=us,
    )


def chain(n, us=10.0, out=1024, allreduces=()):
    """n-op chain 0 -> 1 -> ... -> n-1 with optional AllReduce triples."""
    ops = [op(i, us=us, out=out) for i in range(n)]
    edges = [DataEdge(i, i + 1, out) for i in range(n - 1)]
    return build_graph(ops, edges, allreduces)


def diamond(us=10.0, out=1024):
    """0 -> 1 -> 3 and 0 -> 2 -> 3."""
    ops = [op(i, us=us, out=out) for i in range(4)]
    edges = [
        DataEdge(0, 1, out),
        DataEdge(0, 2, out),
        DataEdge(1, 3, out),
        DataEdge(2, 3, out),
    ]
    return build_graph(ops, edges)


def fixed_costs(op_us=None, comm_us=None):
    """Cost providers: per-op table (summed over members) and per-bucket
    table, defaulting to compute_us fields and 1 us per bucket."""

    def op_cost(g, group):
        total = 0.0
        for m in group.member_ops:
            node = g.op(m)
            if op_us is not None:
                total += op_us[m]
            else:
                total += node.compute_us or 0.0
        return total

    def comm_cost(g, bucket):
        if comm_us is None:
            return 1.0
        return comm_us[bucket.id]

    return CostProviders(op_cost=op_cost, comm_cost=comm_cost)


def random_dag(rng: random.Random, n_ops=8, n_tensors=2, p_edge=0.35):
    """Random layered DAG with AllReduces on some sink-ish ops and
    update consumers; always valid."""
    ops = [op(i, us=round(rng.uniform(1, 40), 1), out=rng.randrange(256, 65536)) for i in range(n_ops)]
    edges = []
    for j in range(1, n_ops):
        preds = [i for i in range(j) if rng.random() < p_edge]
        if not preds and rng.random() < 0.8:
            preds = [rng.randrange(j)]
        for i in preds:
            edges.append(DataEdge(i, j, ops[i].out_bytes))
    ars = []
    next_id = n_ops
    extra_ops = []
    extra_edges = []
    if n_ops >= 1:
        producers = rng.sample(range(n_ops), min(n_tensors, n_ops))
        for t, p in enumerate(producers):
            nbytes = rng.randrange(4096, 4 * 1024 * 1024)
            upd = next_id
            next_id += 1
            extra_ops.append(op(upd, code="ApplyGrad", out=nbytes, us=1.0))
            extra_edges.append(DataEdge(p, upd, nbytes))
            ars.append((t, p, nbytes))
    return build_graph(ops + extra_ops, edges + extra_edges, ars)


@pytest.fixture
def rng():
    return random.Random(1234)
