"""Dense and structured-sparse float32 matrix kernels.

Matrices are plain 2-D ``np.float32`` arrays; ``Layout`` names the memory order
(C order is row-major, Fortran order is column-major). Every product
accumulates each output element sequentially over the contraction axis, which
makes the gather-free sparse kernels bitwise equal to dense-then-select.

The hot loops live in ``_nb`` (numba) and ``_np`` (numpy); which one runs is
decided once at import by ``adaprune._backend``.
"""
from __future__ import annotations

import contextlib
import contextvars
import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from adaprune import _backend
from adaprune.errors import LayoutError, MaskError, ShapeError

if _backend.NUMBA_AVAILABLE:
    from adaprune.kernels import _nb as _impl
else:
    from adaprune.kernels import _np as _impl

from adaprune.kernels import _np as numpy_impl  # noqa: E402

numba_impl = _impl if _backend.NUMBA_AVAILABLE else None

BACKEND = _backend.BACKEND
DTYPE = np.float32


class Layout(enum.Enum):
    ROW_MAJOR = "RowMajor"
    COL_MAJOR = "ColMajor"


def layout_of(m: np.ndarray) -> Layout:
    if m.flags.c_contiguous:
        return Layout.ROW_MAJOR
    if m.flags.f_contiguous:
        return Layout.COL_MAJOR
    raise LayoutError("matrix is not contiguous in either order")


def to_layout(m: np.ndarray, layout: Layout) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if layout is Layout.ROW_MAJOR:
        return np.ascontiguousarray(m)
    return np.asfortranarray(m)


def as_matrix(data, layout: Layout = Layout.ROW_MAJOR) -> np.ndarray:
    return to_layout(np.atleast_2d(np.asarray(data, dtype=DTYPE)), layout)


@dataclass(frozen=True, eq=False)
class ChannelIndexSet:
    """Sorted, duplicate-free subset of ``range(full_dim)``."""

    retained: np.ndarray
    full_dim: int

    def __post_init__(self):
        arr = np.asarray(self.retained, dtype=np.int64).reshape(-1).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "retained", arr)
        object.__setattr__(self, "full_dim", int(self.full_dim))
        self.validate()

    @classmethod
    def full(cls, n: int) -> ChannelIndexSet:
        return cls(np.arange(n, dtype=np.int64), n)

    @classmethod
    def unchecked(cls, retained: Iterable[int], full_dim: int) -> ChannelIndexSet:
        # negative controls only: skips validation
        obj = object.__new__(cls)
        arr = np.asarray(list(retained), dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(obj, "retained", arr)
        object.__setattr__(obj, "full_dim", int(full_dim))
        return obj

    def validate(self) -> None:
        r = self.retained
        if self.full_dim < 0:
            raise MaskError(f"negative full_dim {self.full_dim}")
        if r.size:
            if r[0] < 0 or r[-1] >= self.full_dim or r.min() < 0 or r.max() >= self.full_dim:
                raise MaskError(f"channel index out of range [0, {self.full_dim})")
            if np.any(np.diff(r) <= 0):
                raise MaskError("retained indices must be strictly increasing")

    def is_valid(self) -> bool:
        try:
            self.validate()
        except MaskError:
            return False
        return True

    def expand(self, width: int) -> ChannelIndexSet:
        """Map group indices to the ``width`` contiguous channels of each group."""
        if not self.retained.size:
            return ChannelIndexSet(np.empty(0, np.int64), self.full_dim * width)
        idx = (self.retained[:, None] * width + np.arange(width)[None, :]).reshape(-1)
        return ChannelIndexSet(idx, self.full_dim * width)

    def __len__(self) -> int:
        return int(self.retained.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelIndexSet):
            return NotImplemented
        return self.full_dim == other.full_dim and np.array_equal(self.retained, other.retained)

    def __hash__(self) -> int:
        return hash((self.full_dim, self.retained.tobytes()))

    def __repr__(self) -> str:
        return f"ChannelIndexSet({self.retained.tolist()}, full_dim={self.full_dim})"


def _index_array(keep, full_dim: int) -> np.ndarray:
    if isinstance(keep, ChannelIndexSet):
        if keep.full_dim != full_dim:
            raise MaskError(f"index set over {keep.full_dim} channels, weight has {full_dim}")
        idx = keep.retained
    else:
        idx = np.asarray(keep, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= full_dim):
        raise MaskError(f"channel index out of range [0, {full_dim})")
    return idx


# -- instrumentation ---------------------------------------------------------


@dataclass
class KernelStats:
    """Counters filled in by kernels while an ``instrument()`` block is active."""

    x_traversals: int = 0
    launches: int = 0
    scratch_shapes: list = field(default_factory=list)

    def max_scratch_elems(self) -> int:
        return max((int(np.prod(s)) for s in self.scratch_shapes), default=0)


_STATS: contextvars.ContextVar[KernelStats | None] = contextvars.ContextVar("kernel_stats", default=None)


@contextlib.contextmanager
def instrument() -> Iterator[KernelStats]:
    stats = KernelStats()
    token = _STATS.set(stats)
    try:
        yield stats
    finally:
        _STATS.reset(token)


def _record(traversals: int = 0, scratch: Sequence[tuple] = ()) -> None:
    stats = _STATS.get()
    if stats is not None:
        stats.launches += 1
        stats.x_traversals += traversals
        stats.scratch_shapes.extend(tuple(s) for s in scratch)


# -- kernels -----------------------------------------------------------------


def record_launch(traversals: int = 0) -> None:
    """Count one kernel invocation issued outside this module."""
    _record(traversals=traversals)


def _f32(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m.astype(DTYPE, copy=False)


def matmul(a: np.ndarray, b: np.ndarray, *, impl=None) -> np.ndarray:
    """Row-major product ``a @ b`` with a fixed summation order."""
    a, b = _f32(a, "a"), _f32(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), DTYPE)
    (impl or _impl).matmul(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    _record(traversals=1)
    return out


def sparse_linear(x: np.ndarray, w: np.ndarray, keep, *, impl=None) -> np.ndarray:
    """``(x @ w.T)[:, keep]`` without gathering the retained rows of ``w``.

    ``w`` is ``(C_out, C_in)`` with output channels as rows; ``keep`` indexes
    those rows.
    """
    x, w = _f32(x, "x"), _f32(w, "w")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"x has {x.shape[1]} input channels, w has {w.shape[1]}")
    idx = _index_array(keep, w.shape[0])
    out_t = np.empty((idx.size, x.shape[0]), DTYPE)
    (impl or _impl).sparse_linear_t(np.ascontiguousarray(x.T), np.ascontiguousarray(w), idx, out_t)
    _record(traversals=1)
    return np.ascontiguousarray(out_t.T)


def sparse_linear_colmajor(x: np.ndarray, w: np.ndarray, keep, *, impl=None) -> np.ndarray:
    """Product against only the retained input columns of a column-major ``w``.

    ``x`` is ``(S, |keep|)`` and holds just the retained channels; ``w`` is
    ``(C_out, C_in)`` stored column-major so each retained column is one
    contiguous read.
    """
    x = _f32(x, "x")
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"w must be 2-D, got shape {w.shape}")
    if not w.flags.f_contiguous or w.dtype != DTYPE:
        raise LayoutError("w must be a float32 column-major matrix")
    idx = _index_array(keep, w.shape[1])
    if x.shape[1] != idx.size:
        raise ShapeError(f"x has {x.shape[1]} columns for {idx.size} retained channels")
    out = np.empty((x.shape[0], w.shape[0]), DTYPE)
    (impl or _impl).sparse_linear_cols(np.ascontiguousarray(x), w.T, idx, out)
    _record(traversals=1)
    return out


def silu(z: np.ndarray) -> np.ndarray:
    z = np.array(z, dtype=DTYPE, copy=True)
    return numpy_impl.silu_inplace(z)


def fused_gated_mlp(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, keep, *, impl=None) -> np.ndarray:
    """``silu(x W_gate[keep].T) * (x W_up[keep].T)`` in one pass over ``x``.

    Gate and up accumulators live in per-tile scratch; no ``(S, d_ff)``
    intermediate is ever allocated.
    """
    x, w_gate, w_up = _f32(x, "x"), _f32(w_gate, "w_gate"), _f32(w_up, "w_up")
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"gate {w_gate.shape} and up {w_up.shape} differ")
    if x.shape[1] != w_gate.shape[1]:
        raise ShapeError(f"x has {x.shape[1]} channels, weights expect {w_gate.shape[1]}")
    idx = _index_array(keep, w_gate.shape[0])
    impl = impl or _impl
    s = x.shape[0]
    out_t = np.empty((idx.size, s), DTYPE)
    acc_g, acc_u = impl.fused_scratch(s)
    impl.fused_gated_mlp_t(
        np.ascontiguousarray(x.T), np.ascontiguousarray(w_gate), np.ascontiguousarray(w_up), idx, out_t, acc_g, acc_u
    )
    _record(traversals=1, scratch=[acc_g.shape, acc_u.shape])
    return np.ascontiguousarray(out_t.T)


def gated_mlp_unfused(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, keep, *, impl=None) -> np.ndarray:
    """Four-step reference: gate GEMM, up GEMM, SiLU, elementwise product."""
    g = sparse_linear(x, w_gate, keep, impl=impl)
    u = sparse_linear(x, w_up, keep, impl=impl)
    a = silu(g)
    _record(scratch=[g.shape, u.shape, a.shape])
    return a * u


def layernorm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-row standardisation without affine parameters."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _f32(x, "x")
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = np.square(x64 - mu).mean(axis=1, keepdims=True)
    return ((x64 - mu) / np.sqrt(var + eps)).astype(DTYPE)


__all__ = [
    "BACKEND",
    "ChannelIndexSet",
    "KernelStats",
    "Layout",
    "as_matrix",
    "fused_gated_mlp",
    "gated_mlp_unfused",
    "instrument",
    "layernorm",
    "layout_of",
    "matmul",
    "numba_impl",
    "record_launch",
    "numpy_impl",
    "silu",
    "sparse_linear",
    "sparse_linear_colmajor",
    "to_layout",
]
