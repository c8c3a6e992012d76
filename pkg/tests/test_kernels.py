import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaprune import kernels
from adaprune.errors import LayoutError, MaskError, ShapeError
from adaprune.kernels import ChannelIndexSet, Layout


def dense_then_select(x, w, keep):
    return kernels.matmul(x, np.ascontiguousarray(w.T))[:, list(keep)]


@st.composite
def linear_case(draw):
    s = draw(st.integers(1, 6))
    c_in = draw(st.integers(1, 12))
    c_out = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**31))
    keep = sorted(draw(st.sets(st.integers(0, c_out - 1))))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((s, c_in)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in)).astype(np.float32)
    return x, w, keep


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    eye = np.eye(2, dtype=np.float32)
    assert np.array_equal(kernels.matmul(eye, eye), eye)
    a = np.array([[1, 2], [3, 4]], np.float32)
    assert np.array_equal(kernels.matmul(a, eye), a)


def test_matmul_hand_dot_products():
    a = np.array([[1, 2], [3, 4]], np.float32)
    b = np.array([[5], [6]], np.float32)
    assert np.array_equal(kernels.matmul(a, b), np.array([[17], [39]], np.float32))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        kernels.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_close_to_numpy(rng):
    a = rng.standard_normal((7, 13)).astype(np.float32)
    b = rng.standard_normal((13, 5)).astype(np.float32)
    np.testing.assert_allclose(kernels.matmul(a, b), a.astype(np.float64) @ b, rtol=1e-5, atol=1e-5)


# -- sparse_linear -----------------------------------------------------------


def test_sparse_linear_hand_case():
    x = np.array([[1, 1]], np.float32)
    w = np.array([[1, 0], [0, 2], [3, 0]], np.float32)
    out = kernels.sparse_linear(x, w, ChannelIndexSet([0, 2], 3))
    assert np.array_equal(out, np.array([[1, 3]], np.float32))


def test_sparse_linear_full_mask_is_dense(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((5, 6)).astype(np.float32)
    out = kernels.sparse_linear(x, w, ChannelIndexSet.full(5))
    assert np.array_equal(out, kernels.matmul(x, np.ascontiguousarray(w.T)))


def test_sparse_linear_empty_mask(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((5, 6)).astype(np.float32)
    assert kernels.sparse_linear(x, w, ChannelIndexSet([], 5)).shape == (4, 0)


@given(linear_case())
def test_sparse_linear_equals_dense_then_select(case):
    x, w, keep = case
    out = kernels.sparse_linear(x, w, ChannelIndexSet(keep, w.shape[0]))
    assert out.shape == (x.shape[0], len(keep))
    assert np.array_equal(out, dense_then_select(x, w, keep))


def test_sparse_linear_rejects_foreign_index_set(rng):
    with pytest.raises(MaskError):
        kernels.sparse_linear(np.ones((2, 3)), np.ones((4, 3)), ChannelIndexSet([0], 5))


# -- column-major sparse -----------------------------------------------------


def test_colmajor_hand_case():
    x = np.array([[2]], np.float32)
    w = np.asfortranarray(np.array([[1], [5]], np.float32))
    out = kernels.sparse_linear_colmajor(x, w, ChannelIndexSet([0], 1))
    assert np.array_equal(out, np.array([[2, 10]], np.float32))


def test_colmajor_full_mask_is_dense(rng):
    x = rng.standard_normal((3, 6)).astype(np.float32)
    w = np.asfortranarray(rng.standard_normal((4, 6)).astype(np.float32))
    out = kernels.sparse_linear_colmajor(x, w, ChannelIndexSet.full(6))
    assert np.array_equal(out, kernels.matmul(x, np.ascontiguousarray(w.T)))


def test_colmajor_zero_input_gives_zero(rng):
    w = np.asfortranarray(rng.standard_normal((4, 6)).astype(np.float32))
    out = kernels.sparse_linear_colmajor(np.zeros((3, 2), np.float32), w, ChannelIndexSet([1, 4], 6))
    assert not out.any()


def test_colmajor_matches_zero_padded_dense(rng):
    x = rng.standard_normal((3, 3)).astype(np.float32)
    w = np.asfortranarray(rng.standard_normal((4, 6)).astype(np.float32))
    keep = [0, 2, 5]
    padded = np.zeros((3, 6), np.float32)
    padded[:, keep] = x
    ref = padded.astype(np.float64) @ w.T.astype(np.float64)
    np.testing.assert_allclose(kernels.sparse_linear_colmajor(x, w, ChannelIndexSet(keep, 6)), ref, rtol=1e-5, atol=1e-6)


def test_colmajor_requires_column_major_weights(rng):
    w = rng.standard_normal((4, 6)).astype(np.float32)
    with pytest.raises(LayoutError):
        kernels.sparse_linear_colmajor(np.ones((2, 6), np.float32), w, ChannelIndexSet.full(6))


# -- fused gated MLP ---------------------------------------------------------


def test_silu_zero():
    assert not kernels.silu(np.zeros((2, 3))).any()


def test_fused_matches_unfused_100_cases():
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.standard_normal((8, 16)).astype(np.float32)
        wg = r.standard_normal((12, 16)).astype(np.float32)
        wu = r.standard_normal((12, 16)).astype(np.float32)
        keep = ChannelIndexSet(np.sort(r.choice(12, r.integers(1, 13), replace=False)), 12)
        fused = kernels.fused_gated_mlp(x, wg, wu, keep)
        ref = kernels.gated_mlp_unfused(x, wg, wu, keep)
        assert np.max(np.abs(fused.astype(np.float64) - ref)) <= 1e-6


def test_fused_empty_mask(rng):
    x = rng.standard_normal((5, 4)).astype(np.float32)
    w = rng.standard_normal((3, 4)).astype(np.float32)
    assert kernels.fused_gated_mlp(x, w, w, ChannelIndexSet([], 3)).shape == (5, 0)


def test_fused_traversal_and_scratch_instrumentation(rng):
    s, d, f = 16, 8, 300
    x = rng.standard_normal((s, d)).astype(np.float32)
    w = rng.standard_normal((f, d)).astype(np.float32)
    keep = ChannelIndexSet.full(f)
    with kernels.instrument() as fused:
        kernels.fused_gated_mlp(x, w, w, keep)
    with kernels.instrument() as unfused:
        kernels.gated_mlp_unfused(x, w, w, keep)
    assert fused.x_traversals == 1
    assert unfused.x_traversals == 2
    assert fused.max_scratch_elems() < s * f
    assert unfused.max_scratch_elems() == s * f


def test_instrument_is_scoped(rng):
    x = rng.standard_normal((2, 2)).astype(np.float32)
    with kernels.instrument() as outer:
        kernels.matmul(x, x)
        with kernels.instrument() as inner:
            kernels.matmul(x, x)
        kernels.matmul(x, x)
    assert (outer.launches, inner.launches) == (2, 1)


# -- layernorm ---------------------------------------------------------------


def test_layernorm_constant_row_is_zero():
    assert not kernels.layernorm(np.full((2, 5), 3.0)).any()


def test_layernorm_two_values():
    out = kernels.layernorm(np.array([[1.0, -1.0]]), eps=1e-12)
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-6)


@given(st.integers(0, 2**31))
def test_layernorm_rows_have_zero_mean(seed):
    x = np.random.default_rng(seed).standard_normal((4, 33)) * 10 + 5
    assert np.all(np.abs(kernels.layernorm(x).astype(np.float64).mean(axis=1)) < 1e-6)


def test_layernorm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        kernels.layernorm(np.ones((1, 2)), eps=0)


# -- layout and index sets ---------------------------------------------------


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31))
def test_layout_round_trip(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n)).astype(np.float32)
    col = kernels.to_layout(a, Layout.COL_MAJOR)
    assert col.flags.f_contiguous
    back = kernels.to_layout(col, Layout.ROW_MAJOR)
    assert back.flags.c_contiguous and np.array_equal(back, a)


def test_layout_of():
    a = np.zeros((3, 4), np.float32)
    assert kernels.layout_of(a) is Layout.ROW_MAJOR
    assert kernels.layout_of(np.asfortranarray(a)) is Layout.COL_MAJOR
    with pytest.raises(LayoutError):
        kernels.layout_of(np.zeros((4, 4))[::2, ::2])


@pytest.mark.parametrize("bad", [[2, 1], [1, 1], [-1, 0], [0, 5]])
def test_index_set_rejects_invalid(bad):
    with pytest.raises(MaskError):
        ChannelIndexSet(bad, 5)


def test_index_set_unchecked_is_flagged_invalid():
    assert not ChannelIndexSet.unchecked([3, 1], 5).is_valid()


def test_index_set_expand_groups():
    assert ChannelIndexSet([0, 2], 3).expand(2) == ChannelIndexSet([0, 1, 4, 5], 6)


def test_index_set_is_immutable():
    cs = ChannelIndexSet([0, 1], 3)
    with pytest.raises(ValueError):
        cs.retained[0] = 2


# -- backend parity ----------------------------------------------------------

needs_numba = pytest.mark.skipif(kernels.numba_impl is None, reason="numba backend disabled")


@needs_numba
@given(linear_case())
def test_backends_bitwise_equal_on_gemm_paths(case):
    x, w, keep = case
    np_impl, nb_impl = kernels.numpy_impl, kernels.numba_impl
    idx = ChannelIndexSet(keep, w.shape[0])
    wt = np.ascontiguousarray(w.T)
    assert np.array_equal(kernels.matmul(x, wt, impl=np_impl), kernels.matmul(x, wt, impl=nb_impl))
    assert np.array_equal(kernels.sparse_linear(x, w, idx, impl=np_impl), kernels.sparse_linear(x, w, idx, impl=nb_impl))


@needs_numba
def test_backends_bitwise_equal_colmajor(rng):
    x = rng.standard_normal((5, 4)).astype(np.float32)
    w = np.asfortranarray(rng.standard_normal((7, 9)).astype(np.float32))
    keep = ChannelIndexSet([0, 3, 4, 8], 9)
    a = kernels.sparse_linear_colmajor(x, w, keep, impl=kernels.numpy_impl)
    b = kernels.sparse_linear_colmajor(x, w, keep, impl=kernels.numba_impl)
    assert np.array_equal(a, b)


@needs_numba
def test_backends_agree_on_fused(rng):
    x = rng.standard_normal((9, 16)).astype(np.float32)
    wg = rng.standard_normal((200, 16)).astype(np.float32)
    wu = rng.standard_normal((200, 16)).astype(np.float32)
    keep = ChannelIndexSet(np.arange(0, 200, 3), 200)
    a = kernels.fused_gated_mlp(x, wg, wu, keep, impl=kernels.numpy_impl)
    b = kernels.fused_gated_mlp(x, wg, wu, keep, impl=kernels.numba_impl)
    assert np.max(np.abs(a.astype(np.float64) - b)) <= 1e-6
