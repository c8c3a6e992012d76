"""Harness configuration: defaults, INI config file, then command-line flags."""
from __future__ import annotations

import argparse
import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from adaprune.eap import EapConfig
from adaprune.errors import ConfigError
from adaprune.harness.episodes import EpisodeSpec, multi_regime_spec, static_spec, two_regime_spec
from adaprune.model import ModelConfig
from adaprune.orchestrator import OrchestratorConfig, canonical_mode

SCENARIOS = ("two-regime", "multi-regime", "static")


@dataclass(frozen=True)
class HarnessConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    eap: EapConfig = field(default_factory=EapConfig)
    orch: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    frames: int = 512
    scenario: str = "two-regime"
    regimes: int = 4
    jump_at: int | None = None
    drift_sigma: float = 0.01
    seed: int = 0

    def validate(self) -> HarnessConfig:
        self.model.validate()
        self.eap.validate()
        self.orch.validate()
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.frames < 0:
            raise ConfigError("frames must be >= 0")
        self.episode_spec()
        return self

    def episode_spec(self) -> EpisodeSpec:
        shape = dict(n_visual=self.model.n_visual, d_visual=self.model.d_visual)
        if self.scenario == "static":
            return static_spec(self.frames, self.seed, **shape)
        if self.scenario == "multi-regime":
            return multi_regime_spec(self.frames, self.regimes, self.drift_sigma, self.seed, **shape)
        jump = self.jump_at if self.jump_at is not None else max(1, self.frames // 2)
        return two_regime_spec(self.frames, jump, self.drift_sigma, self.seed, **shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orch"]["mode"] = canonical_mode(self.orch.mode)
        return d


# flag name -> (section, field, parser)
def _onoff(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


def _ms_to_ns(v) -> int:
    return int(round(float(v) * 1e6))


def _opt_int(v):
    return None if v in (None, "", "none", "None") else int(v)


OPTIONS = {
    # model
    "blocks": ("model", "n_blocks", int),
    "d-model": ("model", "d_model", int),
    "heads": ("model", "n_heads", int),
    "d-head": ("model", "d_head", int),
    "d-ff": ("model", "d_ff", int),
    "seq-len": ("model", "seq_len", int),
    "n-visual": ("model", "n_visual", int),
    "d-visual": ("model", "d_visual", int),
    "expert-width": ("model", "expert_width", int),
    "model-seed": ("model", "seed", int),
    # pruning
    "ratio": ("eap", "ratio", float),
    "alpha": ("eap", "alpha", float),
    "lambda": ("eap", "lam", float),
    "p": ("eap", "p", float),
    "window": ("eap", "window", int),
    "calib-frames": ("eap", "calib_frames", int),
    "head-pruning": ("eap", "head_pruning", _onoff),
    "refractory": ("eap", "refractory", int),
    # orchestration
    "mode": ("orch", "mode", canonical_mode),
    "delta-budget-ms": ("orch", "delta_budget_ns", _ms_to_ns),
    "lane-nice": ("orch", "lane_nice", int),
    # episode
    "frames": (None, "frames", int),
    "scenario": (None, "scenario", str),
    "regimes": (None, "regimes", int),
    "jump-at": (None, "jump_at", _opt_int),
    "drift-sigma": (None, "drift_sigma", float),
    "seed": (None, "seed", int),
}


def apply_overrides(cfg: HarnessConfig, values: dict) -> HarnessConfig:
    parts = {"model": {}, "eap": {}, "orch": {}, None: {}}
    for key, raw in values.items():
        if raw is None:
            continue
        name = key.replace("_", "-")
        if name not in OPTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section, attr, conv = OPTIONS[name]
        try:
            parts[section][attr] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc
    return replace(
        cfg,
        model=replace(cfg.model, **parts["model"]),
        eap=replace(cfg.eap, **parts["eap"]),
        orch=replace(cfg.orch, **parts["orch"]),
        **parts[None],
    )


def read_config_file(path) -> dict:
    """Flatten every section of an INI file into one key -> string mapping."""
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key] = value
    return flat


def add_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", type=Path, help="INI file whose keys mirror the flags")
    for name in OPTIONS:
        dest = name.replace("-", "_")
        if name == "head-pruning":
            ap.add_argument("--head-pruning", dest=dest, choices=("on", "off"), default=None)
        elif name == "mode":
            ap.add_argument("--mode", dest=dest, choices=("sync", "synchronous", "interleaved", "dense", "static"), default=None)
        else:
            ap.add_argument(f"--{name}", dest=dest, default=None)


def from_args(args: argparse.Namespace, base: HarnessConfig | None = None) -> HarnessConfig:
    cfg = base or HarnessConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_config_file(args.config))
    flags = {name: getattr(args, name.replace("-", "_"), None) for name in OPTIONS}
    return apply_overrides(cfg, flags).validate()
