"""Command line entry point: ``adaprune {run,bench,verify,flops}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from adaprune import kernels
from adaprune.errors import AdapruneError
from adaprune.harness import config as hcfg
from adaprune.harness.bench import BENCH_MODES, eap_update_estimate, run_benchmark
from adaprune.harness.report import emit_report, write_trace_jsonl
from adaprune.harness.verify import verify_oracles
from adaprune.kernels import ChannelIndexSet
from adaprune.model import SparsityPattern, flops_count, init_model, keep_count, load_weights, save_weights
from adaprune.orchestrator import canonical_mode

log = logging.getLogger("adaprune")


def _model(cfg, args):
    """(config, model); loaded weights bring their own model config."""
    if args.weights:
        model = load_weights(args.weights)
        if model.cfg != cfg.model:
            log.warning("weights carry their own model config; model flags are ignored")
            cfg = replace(cfg, model=model.cfg)
    else:
        model = init_model(cfg.model)
    if args.dump_weights:
        bin_path, manifest = save_weights(model, args.dump_weights)
        log.info("weights written to %s (%s)", bin_path, manifest)
    return cfg, model


def _print_verdicts(verdicts) -> bool:
    for v in verdicts:
        print(v.line())
    return all(v.passed for v in verdicts)


def cmd_run(args) -> int:
    cfg, model = _model(hcfg.from_args(args), args)
    mode = canonical_mode(cfg.orch.mode)
    report, traces, _ = run_benchmark(cfg, model, modes=(mode,))
    paths = emit_report(report, args.out, traces)
    write_trace_jsonl(traces[mode], Path(args.out) / f"trace_{mode}.jsonl")
    stats = report.latency["modes"][mode]
    print(f"{mode}: {stats['frames']} frames, mean {stats['mean_ms']:.3f} ms, p95 {stats['p95_ms']:.3f} ms")
    print(f"report: {paths['json']}")
    return 0 if _print_verdicts(report.verdicts) else 1


def cmd_bench(args) -> int:
    cfg, model = _model(hcfg.from_args(args), args)
    report, traces, _ = run_benchmark(cfg, model, modes=BENCH_MODES)
    paths = emit_report(report, args.out, traces)
    for mode, trace in traces.items():
        write_trace_jsonl(trace, Path(args.out) / f"trace_{mode}.jsonl")
    for mode, stats in report.latency["modes"].items():
        div = report.divergence.get(mode, 0.0)
        print(f"{mode:>12}: mean {stats['mean_ms']:.3f} ms  p95 {stats['p95_ms']:.3f} ms  divergence {div:.4g}")
    if "interleaved_over_sync" in report.latency:
        print(f"interleaved / synchronous mean latency: {report.latency['interleaved_over_sync']:.3f}")
    print(f"report: {paths['json']}")
    return 0 if _print_verdicts(report.verdicts) else 1


def cmd_verify(args) -> int:
    cfg = hcfg.from_args(args)
    verdicts = verify_oracles(cfg, tolerance_scale=args.tolerance_scale, corrupt_mask=args.corrupt_mask)
    ok = _print_verdicts(verdicts)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps([v.to_dict() for v in verdicts], indent=2) + "\n")
    return 0 if ok else 1


def cmd_flops(args) -> int:
    cfg = hcfg.from_args(args)
    mc = cfg.model
    km = keep_count(mc.d_ff, cfg.eap.ratio)
    kh = keep_count(mc.n_heads, cfg.eap.ratio) if cfg.eap.head_pruning else mc.n_heads
    # only the retained counts matter to the analytic counter
    pattern = SparsityPattern(
        tuple(ChannelIndexSet(range(km), mc.d_ff) for _ in range(mc.n_blocks)),
        tuple(ChannelIndexSet(range(kh), mc.n_heads) for _ in range(mc.n_blocks)),
    )
    dense, sparse = flops_count(mc), flops_count(mc, pattern)
    out = {
        "model": mc.to_dict(),
        "ratio": cfg.eap.ratio,
        "kappa_mlp": km,
        "kappa_head": kh,
        "dense": dense.to_dict(),
        "sparse": sparse.to_dict(),
        "mlp_reduction": 1 - sparse.mlp / dense.mlp,
        "total_reduction": 1 - sparse.total / dense.total,
        "eap_update_estimate": eap_update_estimate(mc),
    }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaprune", description="Adaptive structured pruning on a toy streaming policy.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        hcfg.add_flags(p)
        p.set_defaults(func=func)
        return p

    for name, func, help_ in (("run", cmd_run, "run one episode in one mode"), ("bench", cmd_bench, "paired benchmark over all modes")):
        p = add(name, func, help_)
        p.add_argument("--out", default="out", help="output directory for report and traces")
        p.add_argument("--weights", type=Path, help="load weights from a manifest written by --dump-weights")
        p.add_argument("--dump-weights", type=Path, help="write the model weights (.bin + .json manifest)")

    p = add("verify", cmd_verify, "run the oracle suite")
    p.add_argument("--tolerance-scale", type=float, default=1.0, help="multiply every floating tolerance")
    p.add_argument("--corrupt-mask", action="store_true", help="negative control: feed an unsorted mask")
    p.add_argument("--out", default=None)

    add("flops", cmd_flops, "analytic FLOPs for a config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except (AdapruneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
