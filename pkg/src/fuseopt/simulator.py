"""Discrete-event estimator of one training iteration.

One compute stream runs fusion groups back-to-back in order of
readiness; one communication channel transmits buckets in order of
their ready times. A bucket is ready when every member tensor has been
produced; a group that reads an AllReduce result (a parameter update)
waits for the owning bucket to finish. The resulting makespan is the
cost function the search minimizes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable

from .errors import CycleError, MissingCost
from .graph import FusionGroup, HloGraph, TensorBucket, _schedule_nodes_and_deps


@dataclass(frozen=True)
class Timeline:
    compute_events: tuple[tuple[int, float, float], ...]
    comm_events: tuple[tuple[int, float, float], ...]
    makespan_us: float


@dataclass(frozen=True)
class CostProviders:
    """Duration callbacks. ``op_cost(g, group)`` and
    ``comm_cost(g, bucket)`` must be total and non-negative; negative
    values are rejected at this boundary."""

    op_cost: Callable[[HloGraph, FusionGroup], float]
    comm_cost: Callable[[HloGraph, TensorBucket], float]


def _duration(cp: CostProviders, g: HloGraph, node: tuple[str, int]) -> float:
    kind, ident = node
    try:
        if kind == "g":
            value = cp.op_cost(g, g.group(ident))
        else:
            value = cp.comm_cost(g, g.bucket(ident))
    except KeyError as exc:
        raise MissingCost(f"no duration for {kind} {ident}") from exc
    value = float(value)
    if value < 0:
        raise ValueError(f"negative duration {value} for {kind} {ident}")
    return value


def simulate(g: HloGraph, cp: CostProviders) -> Timeline:
    """Schedule the graph on one compute stream and one channel.

    Both resources serve work FIFO by readiness time; compute ties break
    on the smallest member op id, communication ties on the smallest
    member instruction id. Deterministic: identical inputs give
    bit-identical timelines.
    """
    deps = _schedule_nodes_and_deps(g)
    durations = {node: _duration(cp, g, node) for node in deps}
    tiebreak = {("g", gr.id): min(gr.member_ops) for gr in g.groups}
    tiebreak.update({("b", b.id): min(b.members) for b in g.buckets})

    indeg = {node: len(ps) for node, ps in deps.items()}
    succs: dict[tuple[str, int], list[tuple[str, int]]] = {n: [] for n in deps}
    for node, ps in deps.items():
        for p in ps:
            succs[p].append(node)

    ready: dict[str, list[tuple[float, int, int]]] = {"g": [], "b": []}
    for node, d in indeg.items():
        if d == 0:
            ready[node[0]].append((0.0, tiebreak[node], node[1]))
    for heap in ready.values():
        heapq.heapify(heap)

    running: dict[str, tuple[str, int] | None] = {"g": None, "b": None}
    completions: list[tuple[float, int, tuple[str, int]]] = []
    seq = 0
    finish: dict[tuple[str, int], float] = {}
    compute_events: list[tuple[int, float, float]] = []
    comm_events: list[tuple[int, float, float]] = []
    done = 0
    now = 0.0

    def finish_node(node: tuple[str, int], at: float) -> None:
        nonlocal done
        finish[node] = at
        done += 1
        for succ in succs[node]:
            indeg[succ] -= 1
            if indeg[succ] == 0:
                rt = max((finish[p] for p in deps[succ]), default=0.0)
                heapq.heappush(ready[succ[0]], (rt, tiebreak[succ], succ[1]))

    def start_available(at: float) -> bool:
        nonlocal seq
        started = False
        for lane in ("g", "b"):
            if running[lane] is None and ready[lane]:
                rt, _, ident = heapq.heappop(ready[lane])
                node = (lane, ident)
                start = max(at, rt)
                end = start + durations[node]
                running[lane] = node
                if lane == "g":
                    compute_events.append((ident, start, end))
                else:
                    comm_events.append((ident, start, end))
                heapq.heappush(completions, (end, seq, node))
                seq += 1
                started = True
        return started

    total = len(deps)
    while done < total:
        # Drain all completions at the current instant before starting
        # anything, so readiness ties resolve on ids rather than event
        # processing order.
        while completions and completions[0][0] <= now:
            end, _, node = heapq.heappop(completions)
            running[node[0]] = None
            finish_node(node, end)
        if done >= total:
            break
        if start_available(now):
            continue
        if completions:
            now = completions[0][0]
            continue
        raise CycleError("schedule deadlocked; dependency structure is cyclic")

    makespan = 0.0
    for _, _, end in compute_events:
        makespan = max(makespan, end)
    for _, _, end in comm_events:
        makespan = max(makespan, end)
    return Timeline(tuple(compute_events), tuple(comm_events), makespan)


def cost(g: HloGraph, cp: CostProviders) -> float:
    """End-to-end iteration time of the candidate graph."""
    return simulate(g, cp).makespan_us


def fo_bound(g: HloGraph, cp: CostProviders) -> float:
    """Fully-overlapping lower bound: max of the compute total and the
    communication total, ignoring dependencies."""
    total_compute = sum(_duration(cp, g, ("g", gr.id)) for gr in g.groups)
    total_comm = sum(_duration(cp, g, ("b", b.id)) for b in g.buckets)
    return max(total_compute, total_comm)


def format_timeline(tl: Timeline) -> str:
    """Textual table, one event per line sorted by start, with a
    makespan footer."""
    rows = [("compute", gid, s, e) for gid, s, e in tl.compute_events]
    rows += [("comm", bid, s, e) for bid, s, e in tl.comm_events]
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    lines = ["kind id start_us end_us"]
    for kind, ident, s, e in rows:
        lines.append(f"{kind} {ident} {s:.6f} {e:.6f}")
    lines.append(f"makespan_us {tl.makespan_us:.6f}")
    return "\n".join(lines) + "\n"
