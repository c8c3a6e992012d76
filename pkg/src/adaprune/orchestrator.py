"""Two-lane execution: an inference lane that emits an action every frame and a
pruning lane that turns buffered dense activations into the next pattern.

In synchronous mode the pattern update runs inline after the dense pass, so
frame latency is inference plus pruning. In interleaved mode the inference
lane hands the activations off and moves on; the pruning lane publishes the
new pattern through an atomic snapshot that the inference lane picks up at a
frame boundary. The inference lane never waits on the pruning lane: a trigger
that arrives while a job is still in flight is dropped and the previous
pattern stays in force.
"""
from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from adaprune.eap import ChannelFeatureState, EapConfig, EapEngine, SparsityTrigger
from adaprune.errors import ConfigError, StateError
from adaprune.model import (
    ActivationTap,
    Model,
    SparsityPattern,
    action_expert_forward,
    backbone_forward,
    embed,
    encode_observation,
)

log = logging.getLogger(__name__)

now_ns = time.perf_counter_ns

MODES = ("synchronous", "interleaved", "dense", "static")
_ALIASES = {"sync": "synchronous", "synch": "synchronous"}


def canonical_mode(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class OrchestratorConfig:
    mode: str = "interleaved"
    # None: 10% of the episode's mean frame time
    delta_budget_ns: int | None = None
    stale_mask_policy: str = "reuse_previous"
    shutdown_timeout_s: float = 5.0
    # fault injection: extra seconds the pruning lane sleeps per job
    prune_delay_s: float = 0.0
    # niceness added to the pruning-lane thread (Linux); 0 leaves it alone
    lane_nice: int = 10

    def validate(self) -> OrchestratorConfig:
        canonical_mode(self.mode)
        if self.delta_budget_ns is not None and self.delta_budget_ns <= 0:
            raise ConfigError("delta_budget must be positive")
        if self.stale_mask_policy != "reuse_previous":
            raise ConfigError(f"unsupported stale-mask policy {self.stale_mask_policy!r}")
        if self.shutdown_timeout_s <= 0:
            raise ConfigError("shutdown timeout must be positive")
        return self


@dataclass
class FrameRecord:
    frame: int
    mode: str
    triggered: bool
    dropped_trigger: bool
    similarity: float | None
    pattern_version_applied: int
    t_encode: int
    t_similarity: int
    t_backbone: int
    t_expert: int
    t_prune: int | None
    t_wall: int

    @property
    def t_infer(self) -> int:
        return self.t_encode + self.t_backbone + self.t_expert

    def to_dict(self) -> dict:
        return asdict(self)


FIELDS = tuple(FrameRecord.__dataclass_fields__)


@dataclass
class ScheduleTrace:
    rows: list = field(default_factory=list)
    episode_wall: int = 0
    lane_abandoned: bool = False

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


# -- pattern snapshot --------------------------------------------------------


class PatternSlot:
    """Holds the current immutable pattern; swaps are a single reference store.

    Readers never lock. Writers serialise on a lock only to enforce the
    strictly increasing version.
    """

    def __init__(self, initial: SparsityPattern):
        self._current = initial
        self._lock = threading.Lock()
        self.published = [initial.version]

    def read(self) -> SparsityPattern:
        return self._current

    def publish(self, pattern: SparsityPattern) -> None:
        with self._lock:
            if pattern.version <= self._current.version:
                raise StateError(f"version {pattern.version} does not advance {self._current.version}")
            self._current = pattern
            self.published.append(pattern.version)


def publish_pattern(slot: PatternSlot, pattern: SparsityPattern) -> None:
    slot.publish(pattern)


# -- pruning lane ------------------------------------------------------------


@dataclass(frozen=True)
class ActivationHandoff:
    frame: int
    mlp: tuple
    attn: tuple
    features: np.ndarray


class PruningLane:
    """Background thread running pattern updates, at most one job in flight."""

    def __init__(self, engine: EapEngine, slot: PatternSlot, delay_s: float = 0.0, nice: int = 0):
        self.engine = engine
        self.slot = slot
        self.delay_s = delay_s
        self.nice = nice
        self._jobs: queue.Queue = queue.Queue(maxsize=1)
        self._free = threading.Semaphore(1)
        self._running = threading.Event()
        self._running.set()
        self._stop = threading.Event()
        self._pending = False
        self.durations: dict = {}
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._loop, name="pruning-lane", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def suspend(self) -> None:
        self._running.clear()

    def resume(self) -> None:
        self._running.set()

    def try_submit_slot(self) -> bool:
        """Reserve the single job slot without blocking."""
        if self._free.acquire(blocking=False):
            self._pending = True
            return True
        return False

    def submit(self, job: ActivationHandoff) -> None:
        # the slot was reserved, so the queue has room
        self._jobs.put_nowait(job)

    def _wait_running(self) -> bool:
        while not self._running.wait(0.05):
            if self._stop.is_set():
                return False
        return not self._stop.is_set()

    def _deprioritise(self) -> None:
        if not self.nice or not hasattr(os, "setpriority"):
            return
        try:
            tid = threading.get_native_id()
            os.setpriority(os.PRIO_PROCESS, tid, os.getpriority(os.PRIO_PROCESS, tid) + self.nice)
        except OSError as exc:
            log.warning("could not lower pruning-lane priority: %s", exc)

    def _loop(self) -> None:
        self._deprioritise()
        while not self._stop.is_set():
            try:
                job = self._jobs.get(timeout=0.05)
            except queue.Empty:
                continue
            if not self._wait_running():
                return
            t0 = now_ns()
            try:
                if self.delay_s:
                    time.sleep(self.delay_s)
                pattern = self.engine.update(job.mlp, job.attn)
                self.slot.publish(pattern)
            except BaseException as exc:  # surfaced by close()
                self.error = exc
                log.exception("pruning job for frame %d failed", job.frame)
                return
            finally:
                self.durations[job.frame] = now_ns() - t0
                self._pending = False
                self._free.release()

    def idle(self) -> bool:
        return not self._pending

    def close(self, timeout_s: float) -> bool:
        """Drain within ``timeout_s`` unless suspended; False if a job was abandoned."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline and self._running.is_set() and not self.idle() and self.error is None:
            time.sleep(0.001)
        self._stop.set()
        self._thread.join(max(0.0, deadline - time.monotonic()) + 0.1)
        return self.idle() and not self._thread.is_alive()


# -- orchestrator ------------------------------------------------------------


class Orchestrator:
    def __init__(
        self,
        model: Model,
        eap_cfg: EapConfig,
        calib: ChannelFeatureState,
        cfg: OrchestratorConfig = OrchestratorConfig(),
    ):
        self.model = model
        self.cfg = cfg.validate()
        self.mode = canonical_mode(cfg.mode)
        self.eap_cfg = eap_cfg.validate()
        self.engine = EapEngine(model, eap_cfg, calib)
        self.slot = PatternSlot(self.engine.initial_pattern())
        self.trigger = SparsityTrigger(eap_cfg)
        self.lane: PruningLane | None = None
        self._mark: int | None = None
        self._next_frame = 0

    # lifecycle

    def start(self) -> Orchestrator:
        if self.mode == "interleaved" and self.lane is None:
            self.lane = PruningLane(self.engine, self.slot, self.cfg.prune_delay_s, self.cfg.lane_nice)
            self.lane.start()
        self._mark = now_ns()
        return self

    def close(self) -> bool:
        if self.lane is None:
            return True
        ok = self.lane.close(self.cfg.shutdown_timeout_s)
        if self.lane.error is not None:
            raise self.lane.error
        return ok

    def __enter__(self) -> Orchestrator:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    # frames

    def _begin(self) -> int:
        t0 = self._mark if self._mark is not None else now_ns()
        return t0

    def _finish(self, record: FrameRecord, t0: int) -> FrameRecord:
        end = now_ns()
        record.t_wall = end - t0
        self._mark = end
        self._next_frame = record.frame + 1
        return record

    def run_frame(self, obs: np.ndarray, frame: int | None = None):
        frame = self._next_frame if frame is None else frame
        if self.mode == "synchronous":
            return self.run_frame_synchronous(obs, frame)
        if self.mode == "interleaved":
            return self.run_frame_interleaved(obs, frame)
        return self._run_frame_baseline(obs, frame)

    def _encode(self, obs):
        t = now_ns()
        f = encode_observation(self.model, obs)
        return f, now_ns() - t

    def run_frame_synchronous(self, obs: np.ndarray, frame: int):
        t0 = self._begin()
        feats, t_enc = self._encode(obs)
        t1 = now_ns()
        s, fire = self.trigger.observe(feats)
        t_sim = now_ns() - t1
        pattern = self.slot.read()
        x = embed(self.model, feats)
        t2 = now_ns()
        if fire:
            tap = ActivationTap()
            h = backbone_forward(self.model, x, None, tap)
        else:
            h = backbone_forward(self.model, x, pattern)
        t_bb = now_ns() - t2
        t_upd = 0
        if fire:
            t3 = now_ns()
            cfg = self.model.cfg
            new = self.engine.update(tap.mlp_list(cfg.n_blocks), [tap.attn[l] for l in range(cfg.n_blocks)])
            self.slot.publish(new)
            t_upd = now_ns() - t3
        t4 = now_ns()
        action = action_expert_forward(self.model, h)
        t_exp = now_ns() - t4
        rec = FrameRecord(frame, "dense" if fire else "sparse", fire, False, s, pattern.version,
                          t_enc, t_sim, t_bb, t_exp, t_sim + t_upd, 0)
        return action, self._finish(rec, t0)

    def run_frame_interleaved(self, obs: np.ndarray, frame: int):
        if self.lane is None:
            raise StateError("pruning lane not started")
        t0 = self._begin()
        feats, t_enc = self._encode(obs)
        t1 = now_ns()
        s, fire = self.trigger.observe(feats)
        accepted = fire and self.lane.try_submit_slot()
        t_sim = now_ns() - t1
        pattern = self.slot.read()
        x = embed(self.model, feats)
        t2 = now_ns()
        if accepted:
            tap = ActivationTap()
            h = backbone_forward(self.model, x, None, tap)
            n = self.model.cfg.n_blocks
            self.lane.submit(
                ActivationHandoff(frame, tuple(tap.mlp_list(n)), tuple(tap.attn[l] for l in range(n)), feats)
            )
        else:
            h = backbone_forward(self.model, x, pattern)
        t_bb = now_ns() - t2
        t4 = now_ns()
        action = action_expert_forward(self.model, h)
        t_exp = now_ns() - t4
        rec = FrameRecord(frame, "dense" if accepted else "sparse", fire, fire and not accepted, s,
                          pattern.version, t_enc, t_sim, t_bb, t_exp, None, 0)
        return action, self._finish(rec, t0)

    def _run_frame_baseline(self, obs: np.ndarray, frame: int):
        t0 = self._begin()
        feats, t_enc = self._encode(obs)
        x = embed(self.model, feats)
        pattern = None if self.mode == "dense" else self.slot.read()
        t2 = now_ns()
        h = backbone_forward(self.model, x, pattern)
        t_bb = now_ns() - t2
        t4 = now_ns()
        action = action_expert_forward(self.model, h)
        t_exp = now_ns() - t4
        version = -1 if pattern is None else pattern.version
        rec = FrameRecord(frame, "dense" if pattern is None else "sparse", False, False, None, version,
                          t_enc, 0, t_bb, t_exp, 0, 0)
        return action, self._finish(rec, t0)


def run_episode(
    model: Model,
    frames: Iterable[np.ndarray],
    eap_cfg: EapConfig,
    calib: ChannelFeatureState,
    cfg: OrchestratorConfig = OrchestratorConfig(),
    *,
    suspend_lane: bool = False,
):
    """Drive every frame through one orchestrator; returns (actions, trace, orchestrator)."""
    orch = Orchestrator(model, eap_cfg, calib, cfg)
    trace = ScheduleTrace()
    actions = []
    orch.start()
    if suspend_lane and orch.lane is not None:
        orch.lane.suspend()
    start = orch._mark
    try:
        for t, obs in enumerate(frames):
            a, rec = orch.run_frame(obs, t)
            actions.append(a)
            trace.rows.append(rec)
    finally:
        trace.episode_wall = (orch._mark or start) - start
        trace.lane_abandoned = not orch.close()
        if orch.lane is not None:
            for rec in trace.rows:
                rec.t_prune = rec.t_similarity
                if rec.mode == "dense":
                    lane_ns = orch.lane.durations.get(rec.frame)
                    rec.t_prune = None if lane_ns is None else rec.t_prune + lane_ns
    acts = np.stack(actions) if actions else np.empty((0, model.cfg.expert_width), np.float32)
    return acts, trace, orch
