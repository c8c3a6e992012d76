"""Numba kernels. Each output element is accumulated left to right over the
contraction axis with a float32 accumulator; no fastmath, so no reassociation
or FMA contraction."""
import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def matmul(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            av = a[i, p]
            for j in range(n):
                out[i, j] += av * b[p, j]
    return out


@njit(cache=True, nogil=True)
def sparse_linear_t(xt, w, keep, out_t):
    # xt: (C_in, S); w: (C_out, C_in) row-major; out_t: (|keep|, S)
    c_in, s = xt.shape
    for j in range(keep.shape[0]):
        r = keep[j]
        for i in range(s):
            out_t[j, i] = 0.0
        for p in range(c_in):
            wv = w[r, p]
            for i in range(s):
                out_t[j, i] += wv * xt[p, i]
    return out_t


@njit(cache=True, nogil=True)
def sparse_linear_cols(x, wt, keep, out):
    # x: (S, |keep|); wt: (C_in, C_out), i.e. a column-major (C_out, C_in) buffer
    s, n = x.shape
    c_out = wt.shape[1]
    for i in range(s):
        for o in range(c_out):
            out[i, o] = 0.0
        for j in range(n):
            xv = x[i, j]
            r = keep[j]
            for o in range(c_out):
                out[i, o] += xv * wt[r, o]
    return out


@njit(cache=True, nogil=True)
def fused_gated_mlp_t(xt, w_gate, w_up, keep, out_t, acc_g, acc_u):
    c, s = xt.shape
    for j in range(keep.shape[0]):
        r = keep[j]
        for i in range(s):
            acc_g[i] = 0.0
            acc_u[i] = 0.0
        for p in range(c):
            g = w_gate[r, p]
            u = w_up[r, p]
            for i in range(s):
                xv = xt[p, i]
                acc_g[i] += g * xv
                acc_u[i] += u * xv
        for i in range(s):
            z = np.float64(acc_g[i])
            act = np.float32(z / (1.0 + math.exp(-z)))
            out_t[j, i] = act * acc_u[i]
    return out_t


def fused_scratch(s):
    return np.empty(s, np.float32), np.empty(s, np.float32)
