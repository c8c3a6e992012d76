"""Time each hot kernel on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--seq 64] [--d-model 256] [--d-ff 1024] [--ratio 0.4]
"""
import argparse
import timeit

import numpy as np

from adaprune import kernels
from adaprune.kernels import ChannelIndexSet
from adaprune.model import keep_count


def cases(seq, d_model, d_ff, ratio, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((seq, d_model)).astype(np.float32)
    w_gate = rng.standard_normal((d_ff, d_model)).astype(np.float32)
    w_up = rng.standard_normal((d_ff, d_model)).astype(np.float32)
    w_down = np.asfortranarray(rng.standard_normal((d_model, d_ff)).astype(np.float32))
    keep = ChannelIndexSet(np.sort(rng.choice(d_ff, keep_count(d_ff, ratio), replace=False)), d_ff)
    h = rng.standard_normal((seq, len(keep))).astype(np.float32)
    return {
        "matmul": lambda impl: kernels.matmul(x, w_gate.T, impl=impl),
        "sparse_linear": lambda impl: kernels.sparse_linear(x, w_gate, keep, impl=impl),
        "sparse_linear_colmajor": lambda impl: kernels.sparse_linear_colmajor(h, w_down, keep, impl=impl),
        "fused_gated_mlp": lambda impl: kernels.fused_gated_mlp(x, w_gate, w_up, keep, impl=impl),
        "gated_mlp_unfused": lambda impl: kernels.gated_mlp_unfused(x, w_gate, w_up, keep, impl=impl),
    }


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1 << 12:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq", type=int, default=64)
    ap.add_argument("--d-model", type=int, default=256)
    ap.add_argument("--d-ff", type=int, default=1024)
    ap.add_argument("--ratio", type=float, default=0.4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = {"numpy": kernels.numpy_impl}
    if kernels.numba_impl is not None:
        impls["numba"] = kernels.numba_impl
    print(f"S={args.seq} D={args.d_model} d_ff={args.d_ff} ratio={args.ratio}")
    print(f"{'kernel':<24}" + "".join(f"{name:>14}" for name in impls) + f"{'speedup':>10}")
    for name, run in cases(args.seq, args.d_model, args.d_ff, args.ratio).items():
        outs = {k: run(impl) for k, impl in impls.items()}  # also triggers jit compilation
        if "numba" in outs:
            assert np.array_equal(outs["numba"], outs["numpy"]), name
        times = {k: best_of(lambda impl=impl: run(impl), args.repeat) for k, impl in impls.items()}
        row = f"{name:<24}" + "".join(f"{times[k] * 1e3:>11.3f} ms" for k in impls)
        if "numba" in times:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
