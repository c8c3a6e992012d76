import csv
import json
import os
import subprocess
import sys
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from adaprune.eap import visual_similarity
from adaprune.errors import ConfigError
from adaprune.harness import cli
from adaprune.harness.bench import action_divergence, run_benchmark
from adaprune.harness.config import HarnessConfig, apply_overrides, from_args, add_flags
from adaprune.harness.episodes import (
    EpisodeSpec,
    Regime,
    build_calibration,
    generate_episode,
    multi_regime_spec,
    static_spec,
    two_regime_spec,
)
from adaprune.harness.report import REPORT_SCHEMA, emit_report, report_json
from adaprune.harness.verify import verify_oracles
from adaprune.model import encode_observation

from conftest import SMALL

SMALL_HARNESS = HarnessConfig(model=SMALL, frames=48, seed=0)
SMALL_FLAGS = [
    "--blocks", "2", "--d-model", "32", "--heads", "4", "--d-head", "8", "--d-ff", "64",
    "--seq-len", "12", "--n-visual", "6", "--d-visual", "10", "--expert-width", "8",
]


# -- episodes ----------------------------------------------------------------


def test_static_scene_similarity_is_one():
    fr = list(generate_episode(static_spec(10, 3, n_visual=4, d_visual=5)))
    assert all(np.array_equal(fr[0], f) for f in fr)
    assert all(visual_similarity(a, b) == pytest.approx(1.0) for a, b in zip(fr, fr[1:]))


def test_similarity_dips_at_jump():
    fr = list(generate_episode(two_regime_spec(40, 20, 0.01, 0, n_visual=8, d_visual=6)))
    sims = [visual_similarity(a, b) for a, b in zip(fr, fr[1:])]
    boundary = 19  # similarity between frames 19 and 20
    assert sims[boundary] == min(sims)
    assert sims[boundary] < 0.5 < min(s for i, s in enumerate(sims) if i != boundary)


def test_same_seed_same_stream():
    spec = multi_regime_spec(30, 3, 0.05, 7, n_visual=4, d_visual=5)
    assert all(np.array_equal(a, b) for a, b in zip(generate_episode(spec), generate_episode(spec)))
    other = multi_regime_spec(30, 3, 0.05, 8, n_visual=4, d_visual=5)
    assert not np.array_equal(next(generate_episode(spec)), next(generate_episode(other)))


def test_crossfade_regime_has_no_jump():
    spec = EpisodeSpec(40, (Regime(0, 1, 0.0), Regime(20, 2, 0.0, jump=False)), n_visual=8, d_visual=6)
    fr = list(generate_episode(spec))
    sims = [visual_similarity(a, b) for a, b in zip(fr, fr[1:])]
    assert min(sims) > 0.9


@pytest.mark.parametrize(
    "regimes",
    [(), (Regime(1, 0),), (Regime(0, 0), Regime(0, 1)), (Regime(0, 0, -1.0),)],
)
def test_invalid_episode_spec(regimes):
    with pytest.raises(ConfigError):
        EpisodeSpec(10, regimes).validate()


def test_calibration_set(small_model):
    spec = two_regime_spec(20, 10, 0.01, 0, n_visual=SMALL.n_visual, d_visual=SMALL.d_visual)
    one = build_calibration(spec, 1)
    assert len(one) == 1
    calib = build_calibration(spec, 5)
    evaluation = list(generate_episode(spec))[:5]
    assert not any(np.array_equal(c, e) for c, e in zip(calib, evaluation))
    # same base scene as the first regime
    assert visual_similarity(calib[0], evaluation[0]) > 0.99
    for f in calib:
        assert np.isfinite(encode_observation(small_model, f)).all()
    with pytest.raises(ConfigError):
        build_calibration(spec, 0)


# -- config ------------------------------------------------------------------


def _parse(argv):
    import argparse

    ap = argparse.ArgumentParser()
    add_flags(ap)
    return ap.parse_args(argv)


def test_flags_override_file(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[eap]\nratio = 0.25\nalpha = 0.9\n[episode]\nframes = 10\n")
    cfg = from_args(_parse(["--config", str(ini), "--ratio", "0.5"]))
    assert cfg.eap.ratio == 0.5 and cfg.eap.alpha == 0.9 and cfg.frames == 10


def test_every_option_round_trips():
    cfg = from_args(_parse(["--head-pruning", "on", "--mode", "sync", "--lambda", "0.8", "--delta-budget-ms", "2.5", "--p", "5"]))
    assert cfg.eap.head_pruning and cfg.orch.mode == "synchronous"
    assert cfg.eap.lam == 0.8 and cfg.orch.delta_budget_ns == 2_500_000 and cfg.eap.p == 5


@pytest.mark.parametrize("bad", [{"ratio": "abc"}, {"nonsense": 1}, {"head-pruning": "maybe"}])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(HarnessConfig(), bad)


def test_unreadable_config_file(tmp_path):
    with pytest.raises(ConfigError):
        from_args(_parse(["--config", str(tmp_path / "missing.ini")]))


# -- report ------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench_result():
    return run_benchmark(SMALL_HARNESS)


def test_report_schema_and_idempotent_emit(bench_result, tmp_path):
    report, traces, _ = bench_result
    jsonschema.validate(json.loads(report_json(report)), REPORT_SCHEMA)
    emit_report(report, tmp_path / "a", traces)
    emit_report(report, tmp_path / "b", traces)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    with open(tmp_path / "a" / "trace_interleaved.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == SMALL_HARNESS.frames


def test_report_flops_reconcile(bench_result):
    report, _, _ = bench_result
    flops = report.flops
    assert flops["dense_per_frame"]["total"] - flops["sparse_per_frame"]["total"] == flops["savings_per_frame"]
    assert {"dense", "static", "synchronous", "interleaved"} <= set(report.latency["modes"])
    assert report.divergence["dense"] == 0.0


def test_report_rejects_non_finite(bench_result):
    report, _, _ = bench_result
    bad = replace(report, divergence={"x": float("nan")})
    with pytest.raises(ValueError):
        report_json(bad)


def test_unwritable_report_path(bench_result, tmp_path):
    report, _, _ = bench_result
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_report(report, blocker / "sub")


def test_ratio_zero_has_no_savings():
    cfg = replace(SMALL_HARNESS, eap=replace(SMALL_HARNESS.eap, ratio=0.0), frames=16)
    report, _, _ = run_benchmark(cfg, modes=("dense", "synchronous"))
    assert report.flops["savings_per_frame"] == 0
    assert report.divergence["synchronous"] == 0.0


def test_action_divergence():
    ref = np.array([[3.0, 4.0], [1.0, 0.0]])
    assert action_divergence(ref, ref) == 0.0
    assert action_divergence(ref * 2, ref) == pytest.approx(1.0)


# -- oracle suite ------------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_cfg():
    return replace(SMALL_HARNESS, model=replace(SMALL, d_ff=128))


def test_verify_default_all_pass(oracle_cfg):
    verdicts = verify_oracles(oracle_cfg)
    assert all(v.passed for v in verdicts), [v.line() for v in verdicts if not v.passed]


def test_verify_corrupt_mask_fails_only_mask_check(oracle_cfg):
    failed = {v.name for v in verify_oracles(oracle_cfg, corrupt_mask=True) if not v.passed}
    assert failed == {"mask_invariants"}


def test_verify_zero_tolerance(oracle_cfg):
    verdicts = {v.name: v.passed for v in verify_oracles(oracle_cfg, tolerance_scale=0.0)}
    for name in ("sparse_vs_zero_masked", "score_factored_vs_literal", "fused_vs_unfused"):
        assert not verdicts[name]
    for name in ("gather_free_exact", "nearest_rank_exhaustive", "eap_ops_within_formula", "eap_estimate_reference", "mask_invariants"):
        assert verdicts[name]


# -- CLI ---------------------------------------------------------------------


def test_cli_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["run", *SMALL_FLAGS, "--frames", "24", "--mode", "interleaved", "--out", str(out), "--dump-weights", str(tmp_path / "w")])
    assert rc == 0
    lines = (out / "trace_interleaved.jsonl").read_text().splitlines()
    assert len(lines) == 24 and json.loads(lines[0])["frame"] == 0
    jsonschema.validate(json.loads((out / "report.json").read_text()), REPORT_SCHEMA)
    rc = cli.main(["run", "--weights", str(tmp_path / "w"), "--frames", "8", "--mode", "sync", "--out", str(tmp_path / "again")])
    assert rc == 0
    assert "synchronous: 8 frames" in capsys.readouterr().out


def test_cli_verify_exit_codes(capsys):
    assert cli.main(["verify", *SMALL_FLAGS]) == 0
    assert cli.main(["verify", *SMALL_FLAGS, "--corrupt-mask"]) == 1
    assert "[FAIL] mask_invariants" in capsys.readouterr().out


def test_cli_flops(capsys):
    assert cli.main(["flops", "--d-ff", "1000", "--ratio", "0.4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["kappa_mlp"] == 600
    assert out["mlp_reduction"] == pytest.approx(0.4, abs=1e-15)


def test_cli_bad_config_exit_code(capsys):
    assert cli.main(["flops", "--heads", "3"]) == 2
    assert "error" in capsys.readouterr().err


def test_numpy_fallback_flag():
    env = dict(os.environ, ADAPRUNE_DISABLE_NUMBA="1")
    code = "import adaprune.kernels as k; print(k.BACKEND, k.numba_impl is None)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == ["numpy", "True"]
