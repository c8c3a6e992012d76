"""Synthetic streaming scenes: piecewise-stationary base frames plus drift noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from adaprune.errors import ConfigError

RAMP_FRAMES = 16


@dataclass(frozen=True)
class Regime:
    start_frame: int
    base_seed: int
    drift_sigma: float = 0.01
    jump: bool = True


@dataclass(frozen=True)
class EpisodeSpec:
    frames: int
    regimes: tuple
    seed: int = 0
    n_visual: int = 32
    d_visual: int = 64

    def validate(self) -> EpisodeSpec:
        if self.frames < 0:
            raise ConfigError("frames must be >= 0")
        if not self.regimes:
            raise ConfigError("at least one regime is required")
        if self.regimes[0].start_frame != 0:
            raise ConfigError("first regime must start at frame 0")
        starts = [r.start_frame for r in self.regimes]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("regimes must be strictly ordered by start_frame")
        if any(r.drift_sigma < 0 for r in self.regimes):
            raise ConfigError("drift_sigma must be >= 0")
        if self.n_visual <= 0 or self.d_visual <= 0:
            raise ConfigError("frame shape must be positive")
        return self

    @property
    def shape(self) -> tuple:
        return (self.n_visual, self.d_visual)

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int):
    evaluation, calibration = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(evaluation), np.random.default_rng(calibration)


def _base(regime: Regime, shape) -> np.ndarray:
    return np.random.default_rng(regime.base_seed).standard_normal(shape)


def _frames(spec: EpisodeSpec, rng: np.random.Generator, regimes, count: int) -> Iterator[np.ndarray]:
    bases = [_base(r, spec.shape) for r in regimes]
    idx = 0
    for t in range(count):
        while idx + 1 < len(regimes) and regimes[idx + 1].start_frame <= t:
            idx += 1
        reg = regimes[idx]
        base = bases[idx]
        if idx > 0 and not reg.jump:
            # crossfade from the previous regime's base instead of jumping
            w = min(1.0, (t - reg.start_frame + 1) / RAMP_FRAMES)
            base = (1 - w) * bases[idx - 1] + w * base
        noise = rng.standard_normal(spec.shape) * reg.drift_sigma
        yield (base + noise).astype(np.float32)


def generate_episode(spec: EpisodeSpec) -> Iterator[np.ndarray]:
    """Frames of the evaluation stream; deterministic per ``spec.seed``."""
    spec.validate()
    rng, _ = _streams(spec.seed)
    return _frames(spec, rng, spec.regimes, spec.frames)


def build_calibration(spec: EpisodeSpec, k: int) -> list:
    """First ``k`` frames of an independent stream over the first regime."""
    if k < 1:
        raise ConfigError("calibration needs at least one frame")
    spec.validate()
    _, rng = _streams(spec.seed)
    return list(_frames(spec, rng, spec.regimes[:1], k))


def two_regime_spec(frames: int = 512, jump_at: int = 256, drift_sigma: float = 0.01, seed: int = 0, **shape) -> EpisodeSpec:
    regimes = (Regime(0, 2 * seed, drift_sigma, True), Regime(jump_at, 2 * seed + 1, drift_sigma, True))
    return EpisodeSpec(frames, regimes, seed, **shape).validate()


def multi_regime_spec(frames: int = 512, n_regimes: int = 4, drift_sigma: float = 0.01, seed: int = 0, **shape) -> EpisodeSpec:
    span = max(1, frames // n_regimes)
    regimes = tuple(Regime(i * span, 1000 * seed + i, drift_sigma, True) for i in range(n_regimes))
    return EpisodeSpec(frames, regimes, seed, **shape).validate()


def static_spec(frames: int = 512, seed: int = 0, **shape) -> EpisodeSpec:
    return EpisodeSpec(frames, (Regime(0, seed, 0.0, True),), seed, **shape).validate()
