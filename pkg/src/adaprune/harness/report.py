"""Benchmark report container, JSON/CSV emission and the report schema."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

from adaprune.orchestrator import FIELDS, ScheduleTrace


@dataclass
class Verdict:
    name: str
    passed: bool
    measured: float
    threshold: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = "pass" if self.passed else "fail"
        return d

    def line(self) -> str:
        thr = "" if self.threshold is None else f" (threshold {self.threshold:g})"
        extra = f" - {self.detail}" if self.detail else ""
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: measured {self.measured:g}{thr}{extra}"


@dataclass
class Report:
    config: dict
    latency: dict
    flops: dict
    triggers: dict
    divergence: dict
    verdicts: list

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "latency": self.latency,
            "flops": self.flops,
            "triggers": self.triggers,
            "divergence": self.divergence,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


def _check_finite(obj, path="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def report_json(report: Report) -> str:
    d = report.to_dict()
    _check_finite(d)
    return json.dumps(d, indent=2, allow_nan=False) + "\n"


def write_trace_csv(trace: ScheduleTrace, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for rec in trace.rows:
            w.writerow(["" if v is None else v for v in (getattr(rec, f) for f in FIELDS)])
    return path


def write_trace_jsonl(trace: ScheduleTrace, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for rec in trace.rows:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    return path


def emit_report(report: Report, out_dir, traces: dict | None = None) -> dict:
    """Write ``report.json`` plus one ``trace_<mode>.csv`` per trace into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json"}
        paths["json"].write_text(report_json(report))
        for mode, trace in (traces or {}).items():
            paths[f"csv_{mode}"] = write_trace_csv(trace, out / f"trace_{mode}.csv")
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return paths


_NUM = {"type": "number"}
_LAT = {
    "type": "object",
    "required": ["frames", "mean_ms", "p95_ms", "mean_infer_ms"],
    "properties": {"frames": {"type": "integer"}, "mean_ms": _NUM, "p95_ms": _NUM, "mean_infer_ms": _NUM},
}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["config", "latency", "flops", "triggers", "divergence", "verdicts"],
    "additionalProperties": False,
    "properties": {
        "config": {"type": "object", "required": ["model", "eap", "orch", "frames", "seed"]},
        "latency": {
            "type": "object",
            "required": ["modes"],
            "properties": {
                "modes": {"type": "object", "additionalProperties": _LAT},
                "delta_budget_ms": _NUM,
                "delta_within_budget": _NUM,
                "interleaved_over_sync": _NUM,
            },
        },
        "flops": {
            "type": "object",
            "required": ["dense_per_frame", "sparse_per_frame", "savings_per_frame", "eap_update_estimate", "episode"],
        },
        "triggers": {"type": "object"},
        "divergence": {"type": "object", "additionalProperties": _NUM},
        "verdicts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "measured", "verdict"],
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "measured": _NUM,
                    "threshold": {"type": ["number", "null"]},
                    "verdict": {"enum": ["pass", "fail"]},
                },
            },
        },
    },
}
