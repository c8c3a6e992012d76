"""Paired benchmark runs (dense, static mask, synchronous, interleaved) on one episode."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from adaprune.eap import EapEngine, calibrate, eap_flops_estimate
from adaprune.harness.config import HarnessConfig
from adaprune.harness.episodes import build_calibration, generate_episode
from adaprune.harness.report import Report, Verdict
from adaprune.model import Model, SparsityPattern, flops_count, gemm_flops, init_model
from adaprune.orchestrator import ScheduleTrace, run_episode

log = logging.getLogger(__name__)

BENCH_MODES = ("dense", "static", "synchronous", "interleaved")
TRIGGER_HEAVY = 0.25


def prepare(cfg: HarnessConfig, model: Model | None = None):
    """Model, evaluation frames and calibration history for a harness config."""
    model = model or init_model(cfg.model)
    spec = cfg.episode_spec()
    frames = list(generate_episode(spec))
    calib = calibrate(model, build_calibration(spec, cfg.eap.calib_frames))
    return model, frames, calib


def action_divergence(actions: np.ndarray, reference: np.ndarray) -> float:
    """Mean over frames of ||a - a_dense|| / ||a_dense||."""
    if len(actions) == 0:
        return 0.0
    a = np.asarray(actions, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    num = np.linalg.norm(a - r, axis=1)
    den = np.linalg.norm(r, axis=1)
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return float(rel.mean())


def latency_stats(trace: ScheduleTrace) -> dict:
    if not len(trace):
        return {"frames": 0, "mean_ms": 0.0, "p95_ms": 0.0, "mean_infer_ms": 0.0}
    wall = trace.column("t_wall") / 1e6
    infer = np.array([r.t_infer for r in trace.rows]) / 1e6
    return {
        "frames": len(trace),
        "mean_ms": float(wall.mean()),
        "p95_ms": float(np.percentile(wall, 95)),
        "mean_infer_ms": float(infer.mean()),
        "episode_ms": trace.episode_wall / 1e6,
    }


def delta_budget_ns(trace: ScheduleTrace, configured: int | None) -> int:
    if configured is not None:
        return configured
    if not len(trace):
        return 1
    return max(1, int(0.1 * trace.column("t_wall").mean()))


def delta_within_budget(trace: ScheduleTrace, budget_ns: int) -> tuple:
    """(fraction of untriggered frames with wall - t_infer <= budget, count)."""
    rows = [r for r in trace.rows if not r.triggered]
    if not rows:
        return 1.0, 0
    ok = sum((r.t_wall - r.t_infer) <= budget_ns for r in rows)
    return ok / len(rows), len(rows)


def savings_flops(cfg, pattern: SparsityPattern) -> int:
    """FLOPs removed by a pattern, summed GEMM by GEMM over the pruned widths."""
    s, d, dh = cfg.seq_len, cfg.d_model, cfg.d_head
    total = 0
    for l in range(cfg.n_blocks):
        cut = cfg.d_ff - len(pattern.mlp_keep[l])
        total += gemm_flops(s, cut, d) * 2 + gemm_flops(s, d, cut)
        hcut = cfg.n_heads - len(pattern.head_keep[l])
        total += gemm_flops(s, hcut * dh, d) * 3 + gemm_flops(s, d, hcut * dh)
        total += hcut * (gemm_flops(s, s, dh) + gemm_flops(s, dh, s))
    return total


def episode_flops(trace: ScheduleTrace, dense_frame: int, sparse_frame: int) -> int:
    dense = sum(r.mode == "dense" for r in trace.rows)
    return dense * dense_frame + (len(trace) - dense) * sparse_frame


def eap_update_estimate(cfg) -> int:
    return cfg.n_blocks * eap_flops_estimate(cfg.n_visual, cfg.d_model, cfg.seq_len, cfg.d_ff, cfg.d_model)


def run_benchmark(cfg: HarnessConfig, model: Model | None = None, modes=BENCH_MODES):
    """Run ``modes`` on the same frames; returns (Report, traces, actions)."""
    cfg.validate()
    model, frames, calib = prepare(cfg, model)
    traces, actions = {}, {}
    for mode in modes:
        orch_cfg = replace(cfg.orch, mode=mode)
        acts, trace, _ = run_episode(model, frames, cfg.eap, calib, orch_cfg)
        traces[mode], actions[mode] = trace, acts
        log.info("%s: %d frames, mean %.2f ms", mode, len(trace), latency_stats(trace)["mean_ms"])

    mc = model.cfg
    pattern = EapEngine(model, cfg.eap, calib).initial_pattern()
    dense_f = flops_count(mc)
    sparse_f = flops_count(mc, pattern)
    saved = savings_flops(mc, pattern)
    eap_est = eap_update_estimate(mc)

    verdicts = [
        Verdict(
            "flops_reconcile",
            dense_f.total - sparse_f.total == saved,
            float(dense_f.total - sparse_f.total - saved),
            0.0,
            "dense - sparse minus per-GEMM savings",
        )
    ]

    episode = {}
    triggers = {}
    for mode, trace in traces.items():
        n_updates = sum(r.mode == "dense" for r in trace.rows) if mode in ("synchronous", "interleaved") else 0
        episode[mode] = {
            "model": episode_flops(trace, dense_f.total, sparse_f.total),
            "eap_worst_case": n_updates * eap_est,
        }
        versions = sorted({r.pattern_version_applied for r in trace.rows})
        triggers[mode] = {
            "triggered": int(sum(r.triggered for r in trace.rows)),
            "dropped": int(sum(r.dropped_trigger for r in trace.rows)),
            "dense_frames": int(sum(r.mode == "dense" for r in trace.rows)),
            "versions_applied": len(versions),
            "last_version": int(versions[-1]) if versions else 0,
        }

    per_mode = {mode: latency_stats(tr) for mode, tr in traces.items()}
    latency = {"modes": per_mode}
    if "interleaved" in traces:
        tr = traces["interleaved"]
        budget = delta_budget_ns(tr, cfg.orch.delta_budget_ns)
        frac, n = delta_within_budget(tr, budget)
        latency["delta_budget_ms"] = budget / 1e6
        latency["delta_within_budget"] = frac
        verdicts.append(Verdict("delta_bound", frac >= 0.99, frac, 0.99, f"{n} untriggered frames"))
        if "synchronous" in traces and len(tr):
            ratio = per_mode["interleaved"]["mean_ms"] / max(per_mode["synchronous"]["mean_ms"], 1e-12)
            latency["interleaved_over_sync"] = ratio
            rate = triggers["synchronous"]["triggered"] / len(tr)
            if rate >= TRIGGER_HEAVY:
                verdicts.append(Verdict("interleaved_not_slower", ratio <= 1.0, ratio, 1.0, f"trigger rate {rate:.2f}"))

    divergence = {}
    if "dense" in actions:
        for mode, acts in actions.items():
            divergence[mode] = action_divergence(acts, actions["dense"])

    flops = {
        "dense_per_frame": dense_f.to_dict(),
        "sparse_per_frame": sparse_f.to_dict(),
        "savings_per_frame": saved,
        "mlp_reduction": 1 - sparse_f.mlp / dense_f.mlp,
        "total_reduction": 1 - sparse_f.total / dense_f.total,
        "eap_update_estimate": eap_est,
        "episode": episode,
    }
    report = Report(cfg.to_dict(), latency, flops, triggers, divergence, verdicts)
    return report, traces, actions
