"""Simulator-driven backtracking search over the joint fusion space,
an exhaustive enumeration oracle for small instances, and the two
heuristic baselines (post-order op fusion, size-threshold AllReduce
fusion).

The search keeps a priority queue of candidate graphs ordered by
simulated cost. Each step dequeues the cheapest candidate and, for each
enabled method, applies it a random number of times (0..beta) before
re-evaluating; candidates within ``alpha`` of the best cost are
enqueued for further optimization. Distinct fusion states already seen
(by canonical hash) are not enqueued again; a module that comes back
unchanged stays in rotation until the unchanged counter expires.
"""

from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass, field
from typing import Optional

from .errors import InvalidConfig, LimitExceeded
from .graph import HloGraph, canonical_hash, topo_order
from .rewrite import (
    OptimizationMethod,
    bucket_pairs,
    fuse_allreduce,
    fuse_nondup,
    fuse_dup,
    fusible_pairs,
    neighbors_allreduce,
    random_apply,
)
from .simulator import CostProviders, cost, simulate

ALL_METHODS = (
    OptimizationMethod.NON_DUPLICATE_FUSION,
    OptimizationMethod.DUPLICATE_FUSION,
    OptimizationMethod.ALLREDUCE_FUSION,
)


@dataclass(frozen=True)
class SearchConfig:
    alpha: float = 1.05
    beta: int = 10
    max_unchanged: int = 1000
    seed: int = 0
    methods: tuple[OptimizationMethod, ...] = ALL_METHODS
    time_budget_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.alpha < 1:
            raise InvalidConfig("alpha must be >= 1")
        if self.beta < 1:
            raise InvalidConfig("beta must be >= 1")
        if not self.methods:
            raise InvalidConfig("method mask must be non-empty")
        if self.max_unchanged < 1:
            raise InvalidConfig("max_unchanged must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    action: str
    cost_us: float
    best_cost_us: float
    queue_len: int
    enqueued: bool = False


@dataclass
class SearchResult:
    best_graph: HloGraph
    best_cost_us: float
    steps: int
    candidates_evaluated: int
    candidates_enqueued: int
    trace: list[TraceRecord] = field(default_factory=list)


def backtracking_search(
    g0: HloGraph, cfg: SearchConfig, cp: CostProviders
) -> SearchResult:
    """Best fusion state found from ``g0``; never worse than ``g0``."""
    rng = random.Random(cfg.seed)
    started = time.monotonic()

    cost_cache: dict[int, float] = {}
    evaluated = 0

    def eval_cost(g: HloGraph, h: int) -> float:
        nonlocal evaluated
        if h not in cost_cache:
            cost_cache[h] = cost(g, cp)
            evaluated += 1
        return cost_cache[h]

    h0 = canonical_hash(g0)
    best_graph, best_cost = g0, eval_cost(g0, h0)
    seen = {h0}
    queue: list[tuple[float, int, int, HloGraph]] = [(best_cost, 0, h0, g0)]
    enqueue_seq = 1
    enqueued = 0
    unchanged = 0
    steps = 0
    trace: list[TraceRecord] = []
    methods = [m for m in ALL_METHODS if m in cfg.methods]

    while queue and unchanged < cfg.max_unchanged:
        if cfg.time_budget_s is not None and time.monotonic() - started > cfg.time_budget_s:
            break
        _, _, current_hash, current = heapq.heappop(queue)
        steps += 1
        requeued_self = False
        for method in methods:
            n = rng.randint(0, cfg.beta)
            outcome = random_apply(current, method, n, rng)
            candidate = outcome.graph
            h = current_hash if not outcome.applied else canonical_hash(candidate)
            c = eval_cost(candidate, h)
            if c < best_cost:
                best_graph, best_cost = candidate, c
                unchanged = 0
            else:
                unchanged += 1
            entered = False
            if c <= cfg.alpha * best_cost:
                if h not in seen:
                    # Distinct new state: enqueue for further optimization.
                    seen.add(h)
                    heapq.heappush(queue, (c, enqueue_seq, h, candidate))
                    enqueue_seq += 1
                    enqueued += 1
                    entered = True
                elif h == current_hash and not requeued_self:
                    # The module came back unchanged; keep it in rotation
                    # (the unchanged counter is the terminator) but never
                    # hold more than one copy.
                    heapq.heappush(queue, (c, enqueue_seq, h, candidate))
                    enqueue_seq += 1
                    requeued_self = True
                    entered = True
            trace.append(TraceRecord(steps, method.value, c, best_cost, len(queue), entered))

    return SearchResult(
        best_graph=best_graph,
        best_cost_us=best_cost,
        steps=steps,
        candidates_evaluated=evaluated,
        candidates_enqueued=enqueued,
        trace=trace,
    )


def exhaustive_search(
    g0: HloGraph,
    cp: CostProviders,
    max_ops: int = 8,
    max_tensors: int = 4,
) -> SearchResult:
    """Breadth-first closure of the three rewrites with memoized state
    hashes; exact optimum over every reachable fusion state. Only
    feasible on small instances, hence the hard limits."""
    if len(g0.ops) > max_ops:
        raise LimitExceeded(f"{len(g0.ops)} ops exceeds limit {max_ops}")
    if len(g0.allreduces) > max_tensors:
        raise LimitExceeded(f"{len(g0.allreduces)} tensors exceeds limit {max_tensors}")

    h0 = canonical_hash(g0)
    seen = {h0}
    frontier = [g0]
    best_graph, best_cost = g0, cost(g0, cp)
    evaluated = 1
    steps = 0

    while frontier:
        nxt: list[HloGraph] = []
        for g in frontier:
            steps += 1
            idx = g.index
            candidates: list[HloGraph] = []
            for gid, pred in fusible_pairs(g):
                out = fuse_nondup(g, gid, pred)
                if out.applied:
                    candidates.append(out.graph)
                # A duplicate fusion only yields a new state when the
                # predecessor has another consumer to serve and can
                # legally be replicated; otherwise it collapses to the
                # non-duplicate candidate above.
                members = g.group(pred).member_ops
                has_other_consumer = bool(idx.contracted_succs[pred] - {gid}) or any(
                    m in idx.instrs_of_producer for m in members
                )
                if has_other_consumer and not any(
                    m in idx.replica_group_of for m in members
                ):
                    out = fuse_dup(g, gid, pred)
                    if out.applied:
                        candidates.append(out.graph)
            for bid, neighbor in bucket_pairs(g):
                out = fuse_allreduce(g, bid, neighbor)
                if out.applied:
                    candidates.append(out.graph)
            for cand in candidates:
                h = canonical_hash(cand)
                if h in seen:
                    continue
                seen.add(h)
                c = cost(cand, cp)
                evaluated += 1
                if c < best_cost:
                    best_graph, best_cost = cand, c
                nxt.append(cand)
        frontier = nxt

    return SearchResult(
        best_graph=best_graph,
        best_cost_us=best_cost,
        steps=steps,
        candidates_evaluated=evaluated,
        candidates_enqueued=len(seen) - 1,
    )


def greedy_postorder_fusion(g: HloGraph) -> HloGraph:
    """Heuristic baseline: walk ops in post order (reverse topological)
    and non-duplicate-fuse each op's current group with its first
    fusible predecessor when the rewrite is valid."""
    order: list[int] = []
    for gid in topo_order(g):
        order.extend(sorted(g.group(gid).member_ops))
    current = g
    for op_id in reversed(order):
        gid = current.index.normal_group_of[op_id]
        preds = sorted(current.index.contracted_preds[gid])
        for pred in preds:
            outcome = fuse_nondup(current, gid, pred)
            if outcome.applied:
                current = outcome.graph
                break
    return current


def threshold_allreduce_fusion(
    g: HloGraph,
    threshold_bytes: int,
    cp: Optional[CostProviders] = None,
) -> HloGraph:
    """Heuristic baseline: scan buckets in tensor production order and
    merge consecutive neighbors while the merged size stays within the
    threshold. Production order comes from simulating the graph when
    cost providers are given, otherwise from the contracted topological
    order of the producing groups."""
    if threshold_bytes <= 0:
        raise InvalidConfig("threshold must be > 0")
    if not g.buckets:
        return g

    if cp is not None:
        tl = simulate(g, cp)
        start_of = {bid: (start, bid) for bid, start, _ in tl.comm_events}
        order = sorted((b.id for b in g.buckets), key=lambda bid: start_of[bid])
    else:
        position = {gid: i for i, gid in enumerate(topo_order(g))}
        idx = g.index

        def production_key(bid: int) -> tuple[int, int]:
            b = g.bucket(bid)
            pos = max(
                position[idx.export_group(idx.instr_by_id[m].producer_op)]
                for m in b.members
            )
            return (pos, min(b.members))

        order = sorted((b.id for b in g.buckets), key=production_key)

    current = g
    alias = {bid: bid for bid in order}
    acc: Optional[int] = None
    for bid in order:
        live = alias[bid]
        if acc is None:
            acc = live
            continue
        acc_bucket = current.bucket(acc)
        nxt_bucket = current.bucket(live)
        if (
            acc_bucket.total_bytes + nxt_bucket.total_bytes <= threshold_bytes
            and live in neighbors_allreduce(current, acc)
        ):
            outcome = fuse_allreduce(current, acc, live)
            if outcome.applied:
                current = outcome.graph
                merged = min(acc, live)
                alias = {k: merged if v in (acc, live) else v for k, v in alias.items()}
                acc = merged
                continue
        acc = live
    return current
