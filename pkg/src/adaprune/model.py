"""Toy streaming policy: stub visual encoder, residual transformer backbone and
a small action head, with dense and structured-sparse forward passes."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from adaprune.errors import ConfigError, InputError, MaskError
from adaprune.kernels import (
    DTYPE,
    ChannelIndexSet,
    Layout,
    fused_gated_mlp,
    layernorm,
    matmul,
    silu,
    sparse_linear,
    sparse_linear_colmajor,
    to_layout,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 6
    d_model: int = 256
    n_heads: int = 8
    d_head: int = 32
    d_ff: int = 1024
    seq_len: int = 64
    n_visual: int = 32
    d_visual: int = 64
    expert_width: int = 64
    seed: int = 0

    def validate(self) -> ModelConfig:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seed":
                if v < 0:
                    raise ConfigError("seed must be non-negative")
            elif not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")
        if self.n_visual > self.seq_len:
            raise ConfigError(f"n_visual {self.n_visual} exceeds seq_len {self.seq_len}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def keep_count(full: int, ratio: float) -> int:
    """Channels retained at a pruning ratio: round-half-up of (1 - ratio) * full."""
    r = Fraction(ratio).limit_denominator(10**6)
    return math.floor((1 - r) * full + Fraction(1, 2))


@dataclass(frozen=True)
class BlockWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # column-major
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray  # column-major

    NAMES = ("w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down")
    COLMAJOR = ("w_o", "w_down")


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    w_enc: np.ndarray  # (D, D_v)
    prompt: np.ndarray  # (S - N, D) fixed non-visual tokens
    blocks: tuple
    w_exp1: np.ndarray  # (E, D)
    w_exp2: np.ndarray  # (E, E)

    def replace_blocks(self, blocks: Sequence[BlockWeights]) -> Model:
        return Model(self.cfg, self.w_enc, self.prompt, tuple(blocks), self.w_exp1, self.w_exp2)


def _gauss(rng: np.random.Generator, shape, fan_in: int, layout: Layout = Layout.ROW_MAJOR) -> np.ndarray:
    w = rng.standard_normal(shape, dtype=np.float64) / math.sqrt(fan_in)
    return to_layout(w.astype(DTYPE), layout)


def init_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    w_enc = _gauss(rng, (d, cfg.d_visual), cfg.d_visual)
    prompt = rng.standard_normal((cfg.seq_len - cfg.n_visual, d)).astype(DTYPE)
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockWeights(
                w_q=_gauss(rng, (d, d), d),
                w_k=_gauss(rng, (d, d), d),
                w_v=_gauss(rng, (d, d), d),
                w_o=_gauss(rng, (d, d), d, Layout.COL_MAJOR),
                w_gate=_gauss(rng, (f, d), d),
                w_up=_gauss(rng, (f, d), d),
                w_down=_gauss(rng, (d, f), f, Layout.COL_MAJOR),
            )
        )
    w_exp1 = _gauss(rng, (cfg.expert_width, d), d)
    w_exp2 = _gauss(rng, (cfg.expert_width, cfg.expert_width), cfg.expert_width)
    return Model(cfg, w_enc, prompt, tuple(blocks), w_exp1, w_exp2)


# -- sparsity patterns -------------------------------------------------------


@dataclass(frozen=True)
class SparsityPattern:
    """Retained MLP channels and attention heads per block, plus update step."""

    mlp_keep: tuple
    head_keep: tuple
    version: int = 0

    @classmethod
    def full(cls, cfg: ModelConfig, version: int = 0) -> SparsityPattern:
        return cls(
            tuple(ChannelIndexSet.full(cfg.d_ff) for _ in range(cfg.n_blocks)),
            tuple(ChannelIndexSet.full(cfg.n_heads) for _ in range(cfg.n_blocks)),
            version,
        )

    def check(self, cfg: ModelConfig) -> None:
        if len(self.mlp_keep) != cfg.n_blocks or len(self.head_keep) != cfg.n_blocks:
            raise MaskError(f"pattern covers {len(self.mlp_keep)} blocks, model has {cfg.n_blocks}")
        for keeps, dim, what in ((self.mlp_keep, cfg.d_ff, "mlp"), (self.head_keep, cfg.n_heads, "head")):
            sizes = {len(k) for k in keeps}
            if len(sizes) > 1:
                raise MaskError(f"{what} keep sizes differ across blocks: {sorted(sizes)}")
            for k in keeps:
                if k.full_dim != dim:
                    raise MaskError(f"{what} index set over {k.full_dim}, expected {dim}")
                k.validate()

    @property
    def kappa_mlp(self) -> int:
        return len(self.mlp_keep[0]) if self.mlp_keep else 0

    @property
    def kappa_head(self) -> int:
        return len(self.head_keep[0]) if self.head_keep else 0

    def with_version(self, version: int) -> SparsityPattern:
        return SparsityPattern(self.mlp_keep, self.head_keep, version)


# -- forward passes ----------------------------------------------------------


class ActivationSink(Protocol):
    def put_mlp(self, block: int, x_int: np.ndarray) -> None: ...

    def put_attn(self, block: int, heads: np.ndarray) -> None: ...


@dataclass
class ActivationTap:
    """Collects per-block intermediate activations by reference."""

    mlp: dict = field(default_factory=dict)
    attn: dict = field(default_factory=dict)

    def put_mlp(self, block: int, x_int: np.ndarray) -> None:
        self.mlp[block] = x_int

    def put_attn(self, block: int, heads: np.ndarray) -> None:
        self.attn[block] = heads

    def mlp_list(self, n_blocks: int) -> list:
        return [self.mlp[l] for l in range(n_blocks)]


def encode_observation(model: Model, obs: np.ndarray) -> np.ndarray:
    """Per-token linear map from the raw frame width to the model width, then LN."""
    cfg = model.cfg
    obs = np.asarray(obs)
    if obs.shape != (cfg.n_visual, cfg.d_visual):
        raise InputError(f"frame shape {obs.shape}, expected {(cfg.n_visual, cfg.d_visual)}")
    if not np.all(np.isfinite(obs)):
        raise InputError("frame contains non-finite values")
    return layernorm(matmul(obs.astype(DTYPE), model.w_enc.T), LN_EPS)


def embed(model: Model, features: np.ndarray) -> np.ndarray:
    return np.concatenate([features.astype(DTYPE), model.prompt], axis=0)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    z64 -= z64.max(axis=1, keepdims=True)
    np.exp(z64, out=z64)
    z64 /= z64.sum(axis=1, keepdims=True)
    return z64.astype(DTYPE)


def _attention(h: np.ndarray, bw: BlockWeights, heads: ChannelIndexSet, d_head: int) -> np.ndarray:
    ch = heads.expand(d_head)
    q = sparse_linear(h, bw.w_q, ch)
    k = sparse_linear(h, bw.w_k, ch)
    v = sparse_linear(h, bw.w_v, ch)
    out = np.empty_like(q)
    scale = DTYPE(1.0 / math.sqrt(d_head))
    for j in range(len(heads)):
        sl = slice(j * d_head, (j + 1) * d_head)
        scores = matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T)) * scale
        out[:, sl] = matmul(_softmax_rows(scores), v[:, sl])
    return out


def block_forward(
    x: np.ndarray,
    bw: BlockWeights,
    cfg: ModelConfig,
    mlp_keep: ChannelIndexSet,
    head_keep: ChannelIndexSet,
    block: int = 0,
    tap: ActivationSink | None = None,
) -> np.ndarray:
    heads = _attention(layernorm(x, LN_EPS), bw, head_keep, cfg.d_head)
    if tap is not None:
        tap.put_attn(block, heads)
    x = x + sparse_linear_colmajor(heads, bw.w_o, head_keep.expand(cfg.d_head))
    x_int = fused_gated_mlp(layernorm(x, LN_EPS), bw.w_gate, bw.w_up, mlp_keep)
    if tap is not None:
        tap.put_mlp(block, x_int)
    return x + sparse_linear_colmajor(x_int, bw.w_down, mlp_keep)


def backbone_forward(
    model: Model,
    x: np.ndarray,
    pattern: SparsityPattern | None = None,
    tap: ActivationSink | None = None,
) -> np.ndarray:
    """Run all blocks. ``pattern=None`` is the dense path."""
    cfg = model.cfg
    if x.shape != (cfg.seq_len, cfg.d_model):
        raise InputError(f"hidden state shape {x.shape}, expected {(cfg.seq_len, cfg.d_model)}")
    if pattern is None:
        pattern = SparsityPattern.full(cfg)
    else:
        pattern.check(cfg)
    x = x.astype(DTYPE)
    for l, bw in enumerate(model.blocks):
        x = block_forward(x, bw, cfg, pattern.mlp_keep[l], pattern.head_keep[l], l, tap)
    return x


def action_expert_forward(model: Model, h: np.ndarray) -> np.ndarray:
    pooled = h.astype(np.float64).mean(axis=0, keepdims=True).astype(DTYPE)
    hidden = silu(matmul(pooled, model.w_exp1.T))
    return matmul(hidden, model.w_exp2.T)[0]


def zero_masked_model(model: Model, pattern: SparsityPattern) -> Model:
    """Dense-equivalent model with every pruned channel's weights set to zero."""
    cfg = model.cfg
    blocks = []
    for l, bw in enumerate(model.blocks):
        drop_mlp = np.setdiff1d(np.arange(cfg.d_ff), pattern.mlp_keep[l].retained)
        drop_ch = np.setdiff1d(np.arange(cfg.d_model), pattern.head_keep[l].expand(cfg.d_head).retained)
        w = {n: getattr(bw, n).copy(order="K") for n in BlockWeights.NAMES}
        for n in ("w_q", "w_k", "w_v"):
            w[n][drop_ch, :] = 0
        w["w_o"][:, drop_ch] = 0
        w["w_gate"][drop_mlp, :] = 0
        w["w_up"][drop_mlp, :] = 0
        w["w_down"][:, drop_mlp] = 0
        blocks.append(BlockWeights(**w))
    return model.replace_blocks(blocks)


# -- FLOPs accounting --------------------------------------------------------


def gemm_flops(m: int, n: int, k: int) -> int:
    return 2 * m * n * k


def arithmetic_intensity(m: int, n: int, k: int) -> float:
    """FLOPs per byte of a GEMM with 2-byte operands."""
    if min(m, n, k) <= 0:
        raise ValueError("GEMM dims must be positive")
    return (2 * m * n * k) / (2 * (n * k + m * k + m * n))


@dataclass(frozen=True)
class FlopsBreakdown:
    encoder: int
    attn_proj: int
    attn_core: int
    mlp: int
    expert: int

    @property
    def backbone(self) -> int:
        return self.attn_proj + self.attn_core + self.mlp

    @property
    def total(self) -> int:
        return self.encoder + self.backbone + self.expert

    def to_dict(self) -> dict:
        return {**asdict(self), "backbone": self.backbone, "total": self.total}


def block_flops(cfg: ModelConfig, kappa_mlp: int, kappa_head: int) -> tuple:
    s, d = cfg.seq_len, cfg.d_model
    width = kappa_head * cfg.d_head
    proj = 3 * gemm_flops(s, width, d) + gemm_flops(s, d, width)
    core = kappa_head * (gemm_flops(s, s, cfg.d_head) + gemm_flops(s, cfg.d_head, s))
    mlp = 2 * gemm_flops(s, kappa_mlp, d) + gemm_flops(s, d, kappa_mlp)
    return proj, core, mlp


def flops_count(cfg: ModelConfig, pattern: SparsityPattern | None = None) -> FlopsBreakdown:
    """Analytic 2mnk count over every GEMM of one frame."""
    cfg.validate()
    if pattern is not None:
        pattern.check(cfg)
    proj = core = mlp = 0
    for l in range(cfg.n_blocks):
        km = cfg.d_ff if pattern is None else len(pattern.mlp_keep[l])
        kh = cfg.n_heads if pattern is None else len(pattern.head_keep[l])
        p, c, m = block_flops(cfg, km, kh)
        proj, core, mlp = proj + p, core + c, mlp + m
    e = cfg.expert_width
    return FlopsBreakdown(
        encoder=gemm_flops(cfg.n_visual, cfg.d_model, cfg.d_visual),
        attn_proj=proj,
        attn_core=core,
        mlp=mlp,
        expert=gemm_flops(1, e, cfg.d_model) + gemm_flops(1, e, e),
    )


# -- weight dump / load ------------------------------------------------------


def _tensors(model: Model):
    yield "w_enc", model.w_enc
    yield "prompt", model.prompt
    for l, bw in enumerate(model.blocks):
        for n in BlockWeights.NAMES:
            yield f"blocks.{l}.{n}", getattr(bw, n)
    yield "w_exp1", model.w_exp1
    yield "w_exp2", model.w_exp2


def save_weights(model: Model, path) -> tuple:
    """Write ``<path>.bin`` (flat little-endian f32) and ``<path>.json`` manifest."""
    path = Path(path)
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in _tensors(model):
            order = "F" if (arr.flags.f_contiguous and not arr.flags.c_contiguous) else "C"
            raw = np.asarray(arr, dtype="<f4").tobytes(order=order)
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "order": order, "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"dtype": "<f4", "config": model.cfg.to_dict(), "tensors": entries}
    man_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bin_path, man_path


def load_weights(path) -> Model:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    cfg = ModelConfig(**manifest["config"]).validate()
    arrays = {}
    for e in manifest["tensors"]:
        flat = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arrays[e["name"]] = np.array(flat.reshape(e["shape"], order=e["order"]), dtype=DTYPE, order=e["order"])
    blocks = tuple(
        BlockWeights(**{n: arrays[f"blocks.{l}.{n}"] for n in BlockWeights.NAMES}) for l in range(cfg.n_blocks)
    )
    return Model(cfg, arrays["w_enc"], arrays["prompt"], blocks, arrays["w_exp1"], arrays["w_exp2"])
