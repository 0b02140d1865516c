"""Batch front-end: generate workloads, profile them against the
synthetic hardware oracle, fit the comm model, train estimators, and
run simulation, optimization and baseline comparisons.

Exit codes: 0 success, 1 usage error, 2 input error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import comm as comm_mod
from . import estimator as est_mod
from . import workloads as wl_mod
from .errors import (
    DegenerateSamples,
    FuseoptError,
    GraphFormatError,
    InvalidConfig,
    LimitExceeded,
)
from .graph import load_graph, module_stats, save_graph, validate_module
from .rewrite import OptimizationMethod
from .search import (
    SearchConfig,
    backtracking_search,
    exhaustive_search,
    greedy_postorder_fusion,
    threshold_allreduce_fusion,
)
from .simulator import cost, fo_bound, format_timeline, simulate

log = logging.getLogger("fuseopt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_METHOD_NAMES = {
    "nondup": OptimizationMethod.NON_DUPLICATE_FUSION,
    "dup": OptimizationMethod.DUPLICATE_FUSION,
    "ar": OptimizationMethod.ALLREDUCE_FUSION,
}


def _parse_methods(text: str) -> tuple[OptimizationMethod, ...]:
    out = []
    for name in text.split(","):
        name = name.strip()
        if name not in _METHOD_NAMES:
            raise UsageError(f"unknown method {name!r}; choose from nondup,dup,ar")
        out.append(_METHOD_NAMES[name])
    if not out:
        raise UsageError("method mask must be non-empty")
    return tuple(out)


def build_parser() -> _Parser:
    parser = _Parser(prog="fuseopt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic workload graph")
    p.add_argument("--family", choices=wl_mod.FAMILIES, default="chain")
    p.add_argument("--ops", type=int, default=20)
    p.add_argument("--tensors", type=int, default=4)
    p.add_argument("--min-tensor-bytes", type=int, default=4 * 1024)
    p.add_argument("--max-tensor-bytes", type=int, default=64 * 1024 * 1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("profile", help="profile a graph with the hardware oracle")
    p.add_argument("--graph", required=True)
    p.add_argument("--out-profile", required=True)
    p.add_argument("--out-comm")
    _hw_flags(p)

    p = sub.add_parser("fit-comm", help="fit the linear AllReduce model")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-est", help="train a fused-op estimator")
    p.add_argument("--variant", choices=[v.value for v in est_mod.EstimatorVariant],
                   default=est_mod.EstimatorVariant.MESSAGE_PASSING.value)
    p.add_argument("--samples", help="training sample file (JSONL)")
    p.add_argument("--graph", help="generate samples from this graph instead")
    p.add_argument("--count", type=int, default=2000, help="samples to generate with --graph")
    p.add_argument("--min-fusions", type=int, default=1)
    p.add_argument("--max-fusions", type=int, default=0, help="0 means min(50, op count)")
    p.add_argument("--out-samples", help="also write generated samples here")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=3e-3)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _hw_flags(p)

    p = sub.add_parser("simulate", help="simulate one iteration of a graph")
    _provider_flags(p)
    p.add_argument("--out", help="timeline table path (default stdout)")
    p.add_argument("--gantt", help="optional SVG Gantt export")

    p = sub.add_parser("optimize", help="run the backtracking search")
    _provider_flags(p)
    p.add_argument("--alpha", type=float, default=1.05)
    p.add_argument("--beta", type=int, default=10)
    p.add_argument("--max-unchanged", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", default="nondup,dup,ar")
    p.add_argument("--time-budget-s", type=float)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-trace")

    p = sub.add_parser("exhaustive", help="exact optimum on a small graph")
    _provider_flags(p)
    p.add_argument("--max-ops", type=int, default=8)
    p.add_argument("--max-tensors", type=int, default=4)
    p.add_argument("--out-graph")

    p = sub.add_parser("compare", help="compare against heuristic baselines")
    _provider_flags(p)
    p.add_argument("--threshold-bytes", type=int, default=4 * 1024 * 1024)
    p.add_argument("--alpha", type=float, default=1.05)
    p.add_argument("--beta", type=int, default=10)
    p.add_argument("--max-unchanged", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="table path (default stdout)")
    return parser


def _hw_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--launch-us", type=float, default=5.0)
    p.add_argument("--mem-us-per-kb", type=float, default=1.0)
    p.add_argument("--comm-c", type=float, default=0.001)
    p.add_argument("--comm-d", type=float, default=100.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--hw-seed", type=int, default=0)


def _hw_from(args) -> wl_mod.HardwareParams:
    return wl_mod.HardwareParams(
        launch_overhead_us=args.launch_us,
        mem_us_per_byte=args.mem_us_per_kb / 1024.0,
        comm_params=comm_mod.CommModelParams(C=args.comm_c, D=args.comm_d),
        noise=args.noise,
        seed=args.hw_seed,
    )


def _provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--comm", required=True, help="fitted comm params file")
    p.add_argument("--model", help="fused-op estimator file")
    p.add_argument("--launch-us", type=float, default=5.0,
                   help="analytic fallback when no --model is given")
    p.add_argument("--mem-us-per-kb", type=float, default=1.0)


def _providers_from(args):
    profile = est_mod.load_profile(args.profile)
    params = comm_mod.load_params(args.comm)
    if args.model:
        model = est_mod.load_model(args.model)
    else:
        model = est_mod.analytic_model(args.launch_us, args.mem_us_per_kb / 1024.0)
    return est_mod.make_cost_providers(profile, params, model)


def _load_valid_graph(path):
    g = load_graph(path)
    report = validate_module(g)
    if not report.ok:
        raise GraphFormatError(
            f"{path}: invalid graph: " + "; ".join(report.violations[:5])
        )
    return g


def _write_or_print(text: str, path) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _gantt_svg(tl) -> str:
    """One rectangle per event, compute lane on top, comm lane below."""
    span = max(tl.makespan_us, 1e-9)
    width, lane_h, pad = 900.0, 28.0, 4.0
    rows = [("#4c78a8", 0, tl.compute_events), ("#f58518", 1, tl.comm_events)]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{2 * (lane_h + pad) + 20:.0f}">'
    ]
    for color, lane, events in rows:
        y = pad + lane * (lane_h + pad)
        for ident, start, end in events:
            x = start / span * (width - 2)
            w = max((end - start) / span * (width - 2), 0.5)
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{lane_h:.2f}" '
                f'fill="{color}" stroke="black" stroke-width="0.4">'
                f"<title>{ident}: {start:.1f}-{end:.1f} us</title></rect>"
            )
    parts.append(
        f'<text x="2" y="{2 * (lane_h + pad) + 14:.0f}" font-size="11">'
        f"makespan {tl.makespan_us:.3f} us</text></svg>"
    )
    return "".join(parts) + "\n"


def _report_lines(g, cp, label: str) -> list[str]:
    tl = simulate(g, cp)
    costs = {gr.id: cp.op_cost(g, gr) for gr in g.groups}
    comms = {b.id: cp.comm_cost(g, b) for b in g.buckets}
    stats = module_stats(g, costs, comms)
    return [
        f"[{label}] makespan_us {tl.makespan_us:.6f}",
        f"[{label}] fo_bound_us {fo_bound(g, cp):.6f}",
        f"[{label}] total_compute_us {stats.total_compute_us:.6f}",
        f"[{label}] total_comm_us {stats.total_comm_us:.6f}",
        f"[{label}] groups {stats.op_count} buckets {stats.bucket_count}",
    ]


def _cmd_gen(args) -> int:
    spec = wl_mod.WorkloadSpec(
        family=args.family,
        op_count=args.ops,
        tensor_count=args.tensors,
        min_tensor_bytes=args.min_tensor_bytes,
        max_tensor_bytes=args.max_tensor_bytes,
        seed=args.seed,
    )
    g = wl_mod.gen_workload(spec)
    save_graph(args.out, g)
    print(f"wrote {args.out}: {len(g.ops)} ops, {len(g.allreduces)} tensors")
    return 0


def _cmd_profile(args) -> int:
    g = _load_valid_graph(args.graph)
    hw = _hw_from(args)
    profile, samples = wl_mod.make_profile(g, hw)
    est_mod.save_profile(args.out_profile, profile)
    print(f"wrote {args.out_profile}: {len(profile.times)} entries")
    if args.out_comm:
        comm_mod.save_samples(args.out_comm, samples)
        print(f"wrote {args.out_comm}: {len(samples)} samples")
    return 0


def _cmd_fit_comm(args) -> int:
    samples = comm_mod.load_samples(args.samples)
    params = comm_mod.fit(samples)
    comm_mod.save_params(args.out, params)
    print(f"wrote {args.out}: C={params.C!r} D={params.D!r}")
    return 0


def _cmd_train_est(args) -> int:
    variant = est_mod.EstimatorVariant(args.variant)
    if args.samples:
        samples = est_mod.load_samples(args.samples)
    elif args.graph:
        g = _load_valid_graph(args.graph)
        hw = _hw_from(args)
        hi = args.max_fusions or min(50, len(g.ops))
        samples = wl_mod.gen_training_samples(
            g, args.count, (args.min_fusions, hi), hw, seed=args.seed
        )
        if args.out_samples:
            est_mod.save_samples(args.out_samples, samples)
            print(f"wrote {args.out_samples}: {len(samples)} samples")
    else:
        raise UsageError("train-est needs --samples or --graph")
    cfg = est_mod.TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        hidden=args.hidden,
        layers=args.layers,
    )
    model = est_mod.train(samples, cfg, variant)
    est_mod.save_model(args.out, model)
    print(f"wrote {args.out}")
    if model.train_report is not None:
        text = "\n".join(model.train_report.lines()) + "\n"
        if args.report:
            with open(args.report, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    return 0


def _cmd_simulate(args) -> int:
    g = _load_valid_graph(args.graph)
    cp = _providers_from(args)
    tl = simulate(g, cp)
    _write_or_print(format_timeline(tl), args.out)
    if args.gantt:
        with open(args.gantt, "w", encoding="utf-8") as fh:
            fh.write(_gantt_svg(tl))
    return 0


def _cmd_optimize(args) -> int:
    g = _load_valid_graph(args.graph)
    cp = _providers_from(args)
    cfg = SearchConfig(
        alpha=args.alpha,
        beta=args.beta,
        max_unchanged=args.max_unchanged,
        seed=args.seed,
        methods=_parse_methods(args.methods),
        time_budget_s=args.time_budget_s,
    )
    for line in _report_lines(g, cp, "before"):
        print(line)
    result = backtracking_search(g, cfg, cp)
    save_graph(args.out_graph, result.best_graph, explicit_state=True)
    if args.out_trace:
        with open(args.out_trace, "w", encoding="utf-8") as fh:
            fh.write("# step action cost_us best_cost_us queue_len\n")
            for rec in result.trace:
                fh.write(
                    f"{rec.step} {rec.action} {rec.cost_us:.6f} "
                    f"{rec.best_cost_us:.6f} {rec.queue_len}\n"
                )
    for line in _report_lines(result.best_graph, cp, "after"):
        print(line)
    print(
        f"steps {result.steps} evaluated {result.candidates_evaluated} "
        f"enqueued {result.candidates_enqueued}"
    )
    return 0


def _cmd_exhaustive(args) -> int:
    g = _load_valid_graph(args.graph)
    cp = _providers_from(args)
    result = exhaustive_search(g, cp, max_ops=args.max_ops, max_tensors=args.max_tensors)
    print(f"optimum_us {result.best_cost_us:.6f}")
    print(f"states {result.candidates_evaluated}")
    if args.out_graph:
        save_graph(args.out_graph, result.best_graph)
    return 0


def _cmd_compare(args) -> int:
    g = _load_valid_graph(args.graph)
    cp = _providers_from(args)
    cfg = SearchConfig(
        alpha=args.alpha,
        beta=args.beta,
        max_unchanged=args.max_unchanged,
        seed=args.seed,
    )
    rows: list[tuple[str, float]] = []
    rows.append(("no_fusion", cost(g, cp)))
    greedy = greedy_postorder_fusion(g)
    rows.append(("greedy_op_fusion", cost(greedy, cp)))
    threshold = threshold_allreduce_fusion(g, args.threshold_bytes, cp)
    rows.append(("threshold_ar_fusion", cost(threshold, cp)))
    both = threshold_allreduce_fusion(greedy, args.threshold_bytes, cp)
    rows.append(("both", cost(both, cp)))
    result = backtracking_search(g, cfg, cp)
    rows.append(("search", result.best_cost_us))
    width = max(len(name) for name, _ in rows)
    lines = [f"{'strategy':<{width}} cost_us"]
    for name, value in rows:
        lines.append(f"{name:<{width}} {value:.6f}")
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "profile": _cmd_profile,
    "fit-comm": _cmd_fit_comm,
    "train-est": _cmd_train_est,
    "simulate": _cmd_simulate,
    "optimize": _cmd_optimize,
    "exhaustive": _cmd_exhaustive,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("a verb is required")
        if getattr(args, "alpha", 1.0) < 1.0:
            raise UsageError("--alpha must be >= 1")
        if getattr(args, "beta", 1) < 1:
            raise UsageError("--beta must be >= 1")
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return _COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (
        OSError,
        json.JSONDecodeError,
        GraphFormatError,
        LimitExceeded,
        InvalidConfig,
        DegenerateSamples,
    ) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except FuseoptError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
