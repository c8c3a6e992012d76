"""Oracle suite: every check returns a Verdict carrying its measured error.

Floating comparisons are strict (``err < tol``) so a tolerance of zero always
fails them; exact checks ignore the tolerance scale.
"""
from __future__ import annotations

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np

from adaprune import kernels
from adaprune.eap import (
    EapConfig,
    EapEngine,
    calibrate,
    cosine_mean,
    eap_flops_estimate,
    fuse_features,
    importance_scores,
    importance_scores_literal,
    instantaneous_features,
    nearest_rank,
    row_norms,
    update_history,
)
from adaprune.harness.config import HarnessConfig
from adaprune.harness.episodes import build_calibration, two_regime_spec
from adaprune.harness.report import Verdict
from adaprune.kernels import ChannelIndexSet
from adaprune.model import (
    ModelConfig,
    SparsityPattern,
    backbone_forward,
    embed,
    encode_observation,
    init_model,
    keep_count,
    zero_masked_model,
)

SPARSE_TOL = 1e-5
SCORE_TOL = 1e-6
FUSED_TOL = 1e-6
HAND_CASE = (np.array([1.0, 2.0]), 3.0, math.sqrt(153))


def relative_error(a, ref) -> float:
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.max(np.abs(ref)) if ref.size else 0.0
    err = np.max(np.abs(a - ref)) if ref.size else 0.0
    return float(err / scale) if scale > 0 else float(err)


# -- op counting -------------------------------------------------------------


class OpCounter:
    def __init__(self):
        self.ops = 0


class CountingFloat:
    """Float wrapper that bumps a shared counter on every arithmetic op."""

    __slots__ = ("v", "c")

    def __init__(self, v: float, counter: OpCounter):
        self.v = float(v)
        self.c = counter

    def _val(self, o):
        return o.v if isinstance(o, CountingFloat) else float(o)

    def _op(self, r):
        self.c.ops += 1
        return CountingFloat(r, self.c)

    def __add__(self, o):
        return self._op(self.v + self._val(o))

    def __radd__(self, o):
        return self._op(self._val(o) + self.v)

    def __sub__(self, o):
        return self._op(self.v - self._val(o))

    def __rsub__(self, o):
        return self._op(self._val(o) - self.v)

    def __mul__(self, o):
        return self._op(self.v * self._val(o))

    def __rmul__(self, o):
        return self._op(self._val(o) * self.v)

    def __truediv__(self, o):
        return self._op(self.v / self._val(o))

    def __rtruediv__(self, o):
        return self._op(self._val(o) / self.v)

    def sqrt(self):
        return self._op(math.sqrt(self.v))

    # comparisons are not arithmetic
    def __ne__(self, o):
        return self.v != self._val(o)

    def __eq__(self, o):
        return self.v == self._val(o)

    def __lt__(self, o):
        return self.v < self._val(o)

    def __float__(self):
        return self.v

    __hash__ = None


def counting_array(a, counter: OpCounter) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.empty(a.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(a.reshape(-1)):
        flat[i] = CountingFloat(v, counter)
    return out


def count_update_ops(n: int, d: int, s: int, c_in: int, c_out: int, seed: int = 0, n_blocks: int = 1) -> int:
    """Arithmetic ops of one refresh over ``n_blocks`` blocks, weight norms recomputed online.

    Covers the similarity (once per frame, previous-frame norms cached), then
    per block the instantaneous features, fusion, history EMA, weight norms
    and scores. Top-k selection is comparisons only and is not counted.
    """
    rng = np.random.default_rng(seed)
    c = OpCounter()
    f_t = counting_array(rng.standard_normal((n, d)), c)
    f_prev = counting_array(rng.standard_normal((n, d)), c)
    prev_norms = row_norms(f_prev)
    blocks = [
        (
            counting_array(rng.standard_normal((s, c_in)), c),
            counting_array(np.abs(rng.standard_normal(c_in)), c),
            counting_array(rng.standard_normal((c_out, c_in)), c),
        )
        for _ in range(n_blocks)
    ]
    c.ops = 0

    cosine_mean(f_t, row_norms(f_t), f_prev, prev_norms)
    for x_int, hist, w in blocks:
        eps = instantaneous_features(x_int)
        fused = fuse_features(hist, eps, 0.7)
        update_history(hist, eps, 0.9)
        w2 = w * w
        norms = np.array([col.sum().sqrt() for col in (w2 * w2).T], dtype=object)
        importance_scores(norms, fused)
    return c.ops


# -- individual checks -------------------------------------------------------


def _pattern_for(model, ratio: float, rng: np.random.Generator) -> SparsityPattern:
    cfg = model.cfg
    km = keep_count(cfg.d_ff, ratio)
    kh = max(1, keep_count(cfg.n_heads, ratio))
    mlp = tuple(ChannelIndexSet(np.sort(rng.choice(cfg.d_ff, km, replace=False)), cfg.d_ff) for _ in range(cfg.n_blocks))
    heads = tuple(ChannelIndexSet(np.sort(rng.choice(cfg.n_heads, kh, replace=False)), cfg.n_heads) for _ in range(cfg.n_blocks))
    return SparsityPattern(mlp, heads)


def sparse_vs_masked_error(model_cfg: ModelConfig, ratio: float, seed: int) -> float:
    """Relative error of the sparse forward against the zero-masked dense one."""
    model = init_model(replace(model_cfg, seed=seed))
    rng = np.random.default_rng(seed + 7919)
    pattern = _pattern_for(model, ratio, rng)
    obs = rng.standard_normal((model_cfg.n_visual, model_cfg.d_visual)).astype(np.float32)
    x = embed(model, encode_observation(model, obs))
    sparse = backbone_forward(model, x, pattern)
    masked = backbone_forward(zero_masked_model(model, pattern), x)
    return relative_error(sparse, masked)


def check_sparse_vs_masked(model_cfg: ModelConfig, scale: float, ratios=(0.25, 0.4, 0.6), seed: int = 0) -> Verdict:
    tol = SPARSE_TOL * scale
    err = max(sparse_vs_masked_error(model_cfg, r, seed + i) for i, r in enumerate(ratios))
    return Verdict("sparse_vs_zero_masked", err < tol, err, tol, f"{len(ratios)} ratios")


def gather_free_mismatch(rng: np.random.Generator, s: int, c_in: int, c_out: int, ratio: float) -> int:
    """Number of entries where sparse_linear differs from dense-then-select."""
    x = rng.standard_normal((s, c_in)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in)).astype(np.float32)
    keep = ChannelIndexSet(np.sort(rng.choice(c_out, keep_count(c_out, ratio), replace=False)), c_out)
    dense = kernels.matmul(x, np.ascontiguousarray(w.T))[:, keep.retained]
    return int(np.count_nonzero(kernels.sparse_linear(x, w, keep) != dense))


def check_gather_free(seed: int = 0, trials: int = 10) -> Verdict:
    rng = np.random.default_rng(seed)
    bad = sum(gather_free_mismatch(rng, 16, 48, 96, r) for r in np.linspace(0.0, 0.8, trials))
    return Verdict("gather_free_exact", bad == 0, float(bad), 0.0, "mismatched entries")


def check_scores(scale: float, seed: int = 0, trials: int = 100) -> list:
    rng = np.random.default_rng(seed)
    tol = SCORE_TOL * scale
    worst = 0.0
    for _ in range(trials):
        c_out, c_in = rng.integers(1, 24, size=2)
        w = rng.standard_normal((c_out, c_in))
        fused = np.abs(rng.standard_normal(c_in)) * rng.uniform(0.1, 10.0)
        cache = np.sqrt((w**4).sum(axis=0))
        worst = max(worst, relative_error(importance_scores(cache, fused), importance_scores_literal(w, fused)))
    col, e, want = HAND_CASE
    got = float(importance_scores_literal(col.reshape(2, 1), np.array([e]))[0])
    return [
        Verdict("score_factored_vs_literal", worst < tol, worst, tol, f"{trials} random (W, fused)"),
        Verdict("score_hand_case", round(got, 6) == round(want, 6), got, want, "sqrt(153) to 6 decimals"),
    ]


def nearest_rank_oracle(values, p: float) -> float:
    """Smallest window value whose at-or-below count reaches p percent of T."""
    t = len(values)
    need = Fraction(p) * t
    return min(v for v in values if sum(u <= v for u in values) * 100 >= need)


def check_nearest_rank(seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    mismatches = 0
    cases = 0
    for t in range(2, 11):
        win = [float(v) for v in rng.integers(0, 6, size=t) / 5.0]  # ties on purpose
        for p in range(1, 100):
            cases += 1
            mismatches += nearest_rank(win, p) != nearest_rank_oracle(win, p)
    return Verdict("nearest_rank_exhaustive", mismatches == 0, float(mismatches), 0.0, f"{cases} (T, p) cases")


def check_op_count(n=16, d=8, s=10, c_in=32, c_out=16) -> list:
    counted = count_update_ops(n, d, s, c_in, c_out)
    bound = eap_flops_estimate(n, d, s, c_in, c_out)
    return [
        Verdict("eap_ops_within_formula", counted <= bound, float(counted), float(bound), f"N={n} D={d} S={s} C_in={c_in} C_out={c_out}"),
        Verdict("eap_estimate_reference", bound == 2944, float(bound), 2944.0, "eap_flops_estimate(16, 8, 10, 32, 16)"),
    ]


def check_fused(model_cfg: ModelConfig, scale: float, seed: int = 0) -> list:
    tol = FUSED_TOL * scale
    rng = np.random.default_rng(seed)
    s, d, f = model_cfg.seq_len, model_cfg.d_model, model_cfg.d_ff
    x = rng.standard_normal((s, d)).astype(np.float32)
    wg = (rng.standard_normal((f, d)) / math.sqrt(d)).astype(np.float32)
    wu = (rng.standard_normal((f, d)) / math.sqrt(d)).astype(np.float32)
    keep = ChannelIndexSet.full(f)
    with kernels.instrument() as fs:
        fused = kernels.fused_gated_mlp(x, wg, wu, keep)
    with kernels.instrument() as us:
        ref = kernels.gated_mlp_unfused(x, wg, wu, keep)
    err = float(np.max(np.abs(fused.astype(np.float64) - ref)))
    full = s * f
    return [
        Verdict("fused_vs_unfused", err < tol, err, tol, "max abs difference"),
        Verdict(
            "fused_single_traversal",
            fs.x_traversals == 1 and us.x_traversals == 2,
            float(fs.x_traversals),
            1.0,
            f"unfused traversals {us.x_traversals}",
        ),
        Verdict("fused_no_full_intermediate", fs.max_scratch_elems() < full, float(fs.max_scratch_elems()), float(full), "largest scratch vs S*d_ff"),
    ]


def check_mask_invariants(model, eap: EapConfig, calib, corrupt: bool = False) -> Verdict:
    pattern = EapEngine(model, eap, calib).initial_pattern()
    keeps = list(pattern.mlp_keep)
    if corrupt:
        r = keeps[0].retained
        keeps[0] = ChannelIndexSet.unchecked(r[::-1] if len(r) > 1 else np.concatenate([r, r]), keeps[0].full_dim)
    kappa = keep_count(model.cfg.d_ff, eap.ratio)
    bad = sum(not (k.is_valid() and len(k) == kappa) for k in keeps)
    return Verdict("mask_invariants", bad == 0, float(bad), 0.0, "blocks with unsorted, duplicate, out-of-range or wrong-size masks")


def verify_oracles(cfg: HarnessConfig | None = None, *, tolerance_scale: float = 1.0, corrupt_mask: bool = False) -> list:
    """Run the whole suite; failures come back as verdicts, never as exceptions."""
    cfg = cfg or HarnessConfig()
    mc = cfg.model
    model = init_model(mc)
    spec = two_regime_spec(8, 4, cfg.drift_sigma, cfg.seed, n_visual=mc.n_visual, d_visual=mc.d_visual)
    calib = calibrate(model, build_calibration(spec, min(cfg.eap.calib_frames, 4)))
    verdicts = [
        check_sparse_vs_masked(mc, tolerance_scale, seed=cfg.seed),
        check_gather_free(cfg.seed),
        *check_scores(tolerance_scale, cfg.seed),
        check_nearest_rank(cfg.seed),
        *check_op_count(),
        *check_fused(mc, tolerance_scale, cfg.seed),
        check_mask_invariants(model, cfg.eap, calib, corrupt_mask),
    ]
    return verdicts
