"""Pure-numpy twins of the numba kernels, with the same per-element summation
order. Slow, but bitwise comparable on the GEMM paths."""
import numpy as np

_TILE = 128


def matmul(a, b, out):
    out[...] = 0.0
    tmp = np.empty_like(out)
    for p in range(a.shape[1]):
        np.multiply(a[:, p : p + 1], b[p], out=tmp)
        out += tmp
    return out


def sparse_linear_t(xt, w, keep, out_t):
    out_t[...] = 0.0
    tmp = np.empty_like(out_t)
    for p in range(xt.shape[0]):
        wcol = w[keep, p]
        np.multiply(wcol[:, None], xt[p], out=tmp)
        out_t += tmp
    return out_t


def sparse_linear_cols(x, wt, keep, out):
    out[...] = 0.0
    tmp = np.empty_like(out)
    for j in range(keep.shape[0]):
        np.multiply(x[:, j : j + 1], wt[keep[j]], out=tmp)
        out += tmp
    return out


def silu_inplace(z):
    z64 = z.astype(np.float64)
    z[...] = (z64 / (1.0 + np.exp(-z64))).astype(np.float32)
    return z


def fused_gated_mlp_t(xt, w_gate, w_up, keep, out_t, acc_g, acc_u):
    # acc_g / acc_u are (tile, S) scratch; never (d_ff, S)
    c = xt.shape[0]
    n = keep.shape[0]
    tmp = np.empty_like(acc_g)
    for lo in range(0, n, _TILE):
        idx = keep[lo : lo + _TILE]
        t = idx.shape[0]
        g, u, tm = acc_g[:t], acc_u[:t], tmp[:t]
        g[...] = 0.0
        u[...] = 0.0
        for p in range(c):
            xp = xt[p]
            np.multiply(w_gate[idx, p][:, None], xp, out=tm)
            g += tm
            np.multiply(w_up[idx, p][:, None], xp, out=tm)
            u += tm
        silu_inplace(g)
        np.multiply(g, u, out=out_t[lo : lo + t])
    return out_t


def fused_scratch(s):
    return np.empty((_TILE, s), np.float32), np.empty((_TILE, s), np.float32)
