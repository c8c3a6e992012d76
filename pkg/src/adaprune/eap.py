"""Environment-aware adaptive pruning.

A cheap visual-similarity trigger decides when the sparsity pattern should be
refreshed. On a refresh, per-channel activation energy from a dense pass is
blended with a running history and combined with cached weight norms into
importance scores; the top channels per block are kept.

The elementwise helpers are written against plain numpy so they also accept
object arrays, which is how the operation-count oracle instruments them.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from adaprune.errors import ConfigError, ShapeError, StateError
from adaprune.kernels import ChannelIndexSet, record_launch
from adaprune.model import (
    ActivationTap,
    Model,
    SparsityPattern,
    backbone_forward,
    embed,
    encode_observation,
    keep_count,
)


@dataclass(frozen=True)
class EapConfig:
    window: int = 10
    p: float = 80.0
    alpha: float = 0.7
    lam: float = 0.9
    ratio: float = 0.4
    calib_frames: int = 32
    head_pruning: bool = False
    refractory: int = 0

    def validate(self) -> EapConfig:
        if int(self.window) != self.window or self.window < 2:
            raise ConfigError(f"window must be an integer >= 2, got {self.window}")
        if not 0 < self.p < 100:
            raise ConfigError(f"p must lie in (0, 100), got {self.p}")
        if not 0 <= self.alpha < 1:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0 <= self.lam < 1:
            raise ConfigError(f"lambda must lie in [0, 1), got {self.lam}")
        if not 0 <= self.ratio < 1:
            raise ConfigError(f"ratio must lie in [0, 1), got {self.ratio}")
        if self.calib_frames < 1:
            raise ConfigError("calib_frames must be >= 1")
        if self.refractory < 0:
            raise ConfigError("refractory must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _calc(a) -> np.ndarray:
    a = np.asarray(a)
    return a if a.dtype == object else a.astype(np.float64, copy=False)


# -- similarity and trigger --------------------------------------------------


def row_norms(f) -> np.ndarray:
    f = _calc(f)
    return np.sqrt((f * f).sum(axis=1))


def cosine_mean(f_t, norms_t, f_prev, norms_prev) -> float:
    """Mean token-wise cosine given precomputed row norms; zero rows count as 0."""
    dots = (_calc(f_t) * _calc(f_prev)).sum(axis=1)
    denom = norms_t * norms_prev
    nz = np.asarray(denom != 0, dtype=bool)
    cos = np.zeros_like(dots)
    cos[nz] = dots[nz] / denom[nz]
    return cos.sum() / dots.shape[0]


def visual_similarity(f_t, f_prev) -> float:
    f_t, f_prev = np.asarray(f_t), np.asarray(f_prev)
    if f_t.shape != f_prev.shape or f_t.ndim != 2:
        raise ShapeError(f"feature shapes differ: {f_t.shape} vs {f_prev.shape}")
    return float(cosine_mean(f_t, row_norms(f_t), f_prev, row_norms(f_prev)))


class SimilarityWindow:
    """FIFO of the most recent ``capacity`` similarity scores."""

    def __init__(self, capacity: int, values: Iterable[float] = ()):
        if capacity < 1:
            raise ConfigError("window capacity must be positive")
        self.capacity = int(capacity)
        self._buf: deque = deque(values, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def full(self) -> bool:
        return len(self._buf) == self.capacity

    def values(self) -> list:
        return list(self._buf)

    def push(self, s: float) -> None:
        self._buf.append(float(s))


def push_similarity(win: SimilarityWindow, s_t: float) -> SimilarityWindow:
    win.push(s_t)
    return win


def nearest_rank(values: Sequence[float], p: float) -> float:
    """Sorted element at index ceil(p/100 * n) - 1."""
    n = len(values)
    if n == 0:
        raise StateError("empty window")
    rank = math.ceil(Fraction(p) * n / 100)
    rank = min(max(rank, 1), n)
    return sorted(values)[rank - 1]


def should_update(win: SimilarityWindow, s_t: float, p: float) -> bool:
    if not win.full:
        raise StateError(f"window holds {len(win)} of {win.capacity} scores")
    return bool(s_t < nearest_rank(win.values(), p))


class SimilarityTracker:
    """Frame-to-frame similarity with the previous frame's row norms cached."""

    def __init__(self):
        self._prev = None
        self._prev_norms = None

    def reset(self) -> None:
        self._prev = self._prev_norms = None

    def observe(self, features: np.ndarray) -> float | None:
        norms = row_norms(features)
        s = None
        if self._prev is not None:
            if self._prev.shape != features.shape:
                raise ShapeError(f"feature shapes differ: {features.shape} vs {self._prev.shape}")
            s = float(cosine_mean(features, norms, self._prev, self._prev_norms))
        self._prev, self._prev_norms = features, norms
        return s


class SparsityTrigger:
    """Similarity window plus quantile rule; silent until the window is full."""

    def __init__(self, cfg: EapConfig):
        self.cfg = cfg.validate()
        self.window = SimilarityWindow(cfg.window)
        self.tracker = SimilarityTracker()
        self._cooldown = 0

    def observe(self, features: np.ndarray) -> tuple:
        s = self.tracker.observe(features)
        if s is None:
            return None, False
        fire = False
        if self.window.full:
            fire = should_update(self.window, s, self.cfg.p)
            if self._cooldown > 0:
                self._cooldown -= 1
                fire = False
            elif fire:
                self._cooldown = self.cfg.refractory
        self.window.push(s)
        return s, fire


# -- features and scores -----------------------------------------------------


def instantaneous_features(x_int, out=None, scratch=None) -> np.ndarray:
    """Per-channel squared L2 norm of an (S, C) activation over the sequence."""
    x = np.asarray(x_int)
    if x.ndim != 2:
        raise ShapeError(f"activation must be 2-D, got {x.shape}")
    if x.dtype == object or out is None:
        x = _calc(x)
        return (x * x).sum(axis=0)
    np.square(x, out=scratch)
    return scratch.sum(axis=0, out=out)


def head_features(heads, n_heads: int, out=None) -> np.ndarray:
    """Sum of squares over sequence and intra-head width, one value per head."""
    x = _calc(heads)
    s, width = x.shape
    per_head = (x * x).reshape(s, n_heads, width // n_heads).sum(axis=(0, 2))
    if out is not None:
        out[...] = per_head
        return out
    return per_head


def _same_len(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"length mismatch: {np.shape(a)} vs {np.shape(b)}")


def _blend(a, wa: float, b, wb: float, out, tmp):
    np.multiply(b, wb, out=tmp)
    np.multiply(a, wa, out=out)
    out += tmp
    return out


def fuse_features(hist, eps, alpha: float, out=None, tmp=None) -> np.ndarray:
    _same_len(hist, eps)
    if out is None:
        return alpha * _calc(hist) + (1 - alpha) * _calc(eps)
    return _blend(hist, alpha, eps, 1 - alpha, out, np.empty_like(out) if tmp is None else tmp)


def update_history(hist, eps, lam: float, out=None, tmp=None) -> np.ndarray:
    _same_len(hist, eps)
    if out is None:
        return lam * _calc(hist) + (1 - lam) * _calc(eps)
    return _blend(hist, lam, eps, 1 - lam, out, np.empty_like(out) if tmp is None else tmp)


@dataclass(frozen=True)
class WeightNormCache:
    """Per-channel sqrt(sum_i W[i,k]**4) of every block's output projection.

    ``mlp`` stacks the down-projection columns (L, d_ff); ``heads`` groups the
    output-projection columns by head (L, H).
    """

    mlp: np.ndarray
    heads: np.ndarray

    @classmethod
    def from_model(cls, model: Model) -> WeightNormCache:
        cfg = model.cfg
        mlp = np.empty((cfg.n_blocks, cfg.d_ff))
        heads = np.empty((cfg.n_blocks, cfg.n_heads))
        for l, bw in enumerate(model.blocks):
            w4 = np.square(np.square(bw.w_down.astype(np.float64)))
            mlp[l] = np.sqrt(w4.sum(axis=0))
            o4 = np.square(np.square(bw.w_o.astype(np.float64)))
            heads[l] = np.sqrt(o4.sum(axis=0).reshape(cfg.n_heads, cfg.d_head).sum(axis=1))
        mlp.setflags(write=False)
        heads.setflags(write=False)
        return cls(mlp, heads)


def importance_scores(w_cache, fused) -> np.ndarray:
    """Score of channel k: fused_k times the cached column norm (fused_k >= 0)."""
    _same_len(w_cache, fused)
    fused = _calc(fused)
    if fused.dtype != object and np.any(fused < 0):
        raise StateError("fused features must be non-negative")
    return fused * w_cache


def importance_scores_literal(w_final, fused) -> np.ndarray:
    """Direct elementwise form: || { |W[i,k]|^2 * fused_k }_i ||_2 per column k."""
    w = np.asarray(w_final, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    if w.shape[1] != fused.shape[0]:
        raise ShapeError(f"{w.shape[1]} columns vs {fused.shape[0]} features")
    out = np.empty(w.shape[1])
    for k in range(w.shape[1]):
        terms = [abs(w[i, k]) ** 2 * fused[k] for i in range(w.shape[0])]
        out[k] = math.sqrt(sum(t * t for t in terms))
    return out


def batched_scores(w_cache, fused, out=None) -> np.ndarray:
    """All blocks' scores in one elementwise pass over stacked (L, C) buffers."""
    _same_len(w_cache, fused)
    if np.ndim(fused) != 2:
        raise ShapeError("expected stacked (L, C) buffers")
    record_launch()
    if out is None:
        return _calc(fused) * w_cache
    return np.multiply(fused, w_cache, out=out)


def looped_scores(w_cache, fused) -> np.ndarray:
    out = np.empty(np.shape(fused))
    for l in range(np.shape(fused)[0]):
        record_launch()
        out[l] = importance_scores(w_cache[l], fused[l])
    return out


def _top_k_rows(scores: np.ndarray, k: int) -> list:
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    order.sort(axis=1)
    return [ChannelIndexSet(row, scores.shape[1]) for row in order]


def select_mask(
    scores,
    cfg: EapConfig,
    version: int = 0,
    head_scores=None,
    n_heads: int | None = None,
) -> SparsityPattern:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    kappa = keep_count(scores.shape[1], cfg.ratio)
    if kappa < 1:
        raise ConfigError(f"ratio {cfg.ratio} keeps no channels of {scores.shape[1]}")
    mlp_keep = tuple(_top_k_rows(scores, kappa))
    if head_scores is not None:
        head_scores = np.atleast_2d(np.asarray(head_scores, dtype=np.float64))
        kh = keep_count(head_scores.shape[1], cfg.ratio)
        if kh < 1:
            raise ConfigError(f"ratio {cfg.ratio} keeps no heads of {head_scores.shape[1]}")
        head_keep = tuple(_top_k_rows(head_scores, kh))
    else:
        if n_heads is None:
            raise ConfigError("n_heads required when head pruning is off")
        head_keep = tuple(ChannelIndexSet.full(n_heads) for _ in range(scores.shape[0]))
    return SparsityPattern(mlp_keep, head_keep, version)


def eap_flops_estimate(n: int, d: int, s: int, c_in: int, c_out: int) -> int:
    """Worst-case FLOPs of one update for one block (weight norms computed online)."""
    return 5 * n * d + 2 * s * c_in + 3 * c_in * c_out + 4 * c_in


# -- state and the update step ----------------------------------------------


@dataclass
class ChannelFeatureState:
    hist: np.ndarray  # (L, d_ff)
    head_hist: np.ndarray  # (L, H)
    tau: int = 0

    def copy(self) -> ChannelFeatureState:
        return ChannelFeatureState(self.hist.copy(), self.head_hist.copy(), self.tau)


def calibrate(model: Model, frames: Sequence[np.ndarray]) -> ChannelFeatureState:
    """Average per-block instantaneous features over dense passes of ``frames``."""
    frames = list(frames)
    if not frames:
        raise ConfigError("calibration set is empty")
    cfg = model.cfg
    hist = np.zeros((cfg.n_blocks, cfg.d_ff))
    head_hist = np.zeros((cfg.n_blocks, cfg.n_heads))
    for obs in frames:
        tap = ActivationTap()
        backbone_forward(model, embed(model, encode_observation(model, obs)), None, tap)
        for l in range(cfg.n_blocks):
            hist[l] += instantaneous_features(tap.mlp[l])
            head_hist[l] += head_features(tap.attn[l], cfg.n_heads)
    hist /= len(frames)
    head_hist /= len(frames)
    return ChannelFeatureState(hist, head_hist, 0)


def update_step(hist, x_ints: Sequence, w_cache, alpha: float, lam: float, work: dict | None = None):
    """One refresh over all blocks: features, fusion, history EMA, scores.

    Returns ``(new_hist, scores)``. With ``work`` (preallocated float64
    buffers ``eps``, ``fused``, ``scores``, ``sq``, ``tmp``) nothing is allocated.
    """
    n_blocks = len(x_ints)
    if work is None:
        eps = np.stack([instantaneous_features(x) for x in x_ints])
        fused = fuse_features(hist, eps, alpha)
        new_hist = update_history(hist, eps, lam)
        return new_hist, batched_scores(w_cache, fused)
    eps, fused, scores, sq, tmp = (work[k] for k in ("eps", "fused", "scores", "sq", "tmp"))
    for l in range(n_blocks):
        instantaneous_features(x_ints[l], out=eps[l], scratch=sq)
    fuse_features(hist, eps, alpha, out=fused, tmp=tmp)
    update_history(hist, eps, lam, out=hist, tmp=tmp)
    batched_scores(w_cache, fused, out=scores)
    return hist, scores


class EapEngine:
    """Owns the running feature history and turns dense activations into patterns.

    Single writer: only the thread calling :meth:`update` touches the state.
    """

    def __init__(self, model: Model, cfg: EapConfig, state: ChannelFeatureState):
        self.cfg = cfg.validate()
        mc = model.cfg
        self.model_cfg = mc
        self.cache = WeightNormCache.from_model(model)
        self.state = state.copy()
        self.work = {
            "eps": np.empty((mc.n_blocks, mc.d_ff)),
            "fused": np.empty((mc.n_blocks, mc.d_ff)),
            "scores": np.empty((mc.n_blocks, mc.d_ff)),
            "sq": np.empty((mc.seq_len, mc.d_ff)),
            "tmp": np.empty((mc.n_blocks, mc.d_ff)),
        }

    def initial_pattern(self) -> SparsityPattern:
        """Mask from the calibration history alone (fused == history)."""
        scores = batched_scores(self.cache.mlp, self.state.hist)
        heads = self.cache.heads * self.state.head_hist if self.cfg.head_pruning else None
        return select_mask(scores, self.cfg, self.state.tau, heads, self.model_cfg.n_heads)

    def update(self, mlp_acts: Sequence[np.ndarray], attn_acts: Sequence[np.ndarray] | None = None) -> SparsityPattern:
        cfg = self.cfg
        _, scores = update_step(self.state.hist, mlp_acts, self.cache.mlp, cfg.alpha, cfg.lam, self.work)
        head_scores = None
        if cfg.head_pruning:
            if attn_acts is None:
                raise StateError("head pruning needs attention activations")
            eps_h = np.stack([head_features(a, self.model_cfg.n_heads) for a in attn_acts])
            fused_h = fuse_features(self.state.head_hist, eps_h, cfg.alpha)
            update_history(self.state.head_hist, eps_h, cfg.lam, out=self.state.head_hist)
            head_scores = self.cache.heads * fused_h
        self.state.tau += 1
        return select_mask(scores, cfg, self.state.tau, head_scores, self.model_cfg.n_heads)
