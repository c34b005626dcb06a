"""Time the numba kernels against the numpy fallback on representative shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--dtype float32] [--quick]

Each case runs both backends on identical inputs and reports the best-of-N
wall time. Forward kernels share one accumulation order and must agree bit
for bit; backward kernels sum in different orders, so the last column shows
their max relative difference instead.
"""
import argparse
import time

import numpy as np

from dcffnet import tensor as T
from dcffnet.kernels import get_backend


def conv_case(c_in, c_out, size, k, stride, pad):
    spec = T.ConvSpec(k, k, stride, pad, c_in, c_out)
    ho = spec.out_extent(size, size)

    def setup(rng, dt):
        x = rng.standard_normal((c_in, size + 2 * pad, size + 2 * pad)).astype(dt)
        w = rng.standard_normal(spec.weight_shape).astype(dt)
        b = rng.standard_normal(c_out).astype(dt)
        g = rng.standard_normal((c_out, *ho)).astype(dt)
        return x, w, b, g

    def fwd(K, x, w, b, g):
        return K.conv2d_forward(x, w, b, stride, np.zeros((c_out, *ho), dtype=x.dtype))

    def bwd_in(K, x, w, b, g):
        return K.conv2d_backward_input(g, w, stride, np.zeros_like(x))

    def bwd_w(K, x, w, b, g):
        return K.conv2d_backward_weight(g, x, stride, np.zeros_like(w))

    name = f"conv {c_in}->{c_out} {size}px k{k}s{stride}"
    return [(name + " fwd", setup, fwd), (name + " bwd-in", setup, bwd_in), (name + " bwd-w", setup, bwd_w)]


def xcorr_case(c, s, t):
    def setup(rng, dt):
        return (rng.standard_normal((c, s, s)).astype(dt), rng.standard_normal((c, t, t)).astype(dt),
                rng.standard_normal((c, s - t + 1, s - t + 1)).astype(dt))

    def fwd(K, a, b, g):
        return K.xcorr_forward(a, b, np.zeros_like(g))

    def bwd(K, a, b, g):
        ga, gb = np.zeros_like(a), np.zeros_like(b)
        K.xcorr_backward(g, a, b, ga, gb)
        return np.concatenate([ga.ravel(), gb.ravel()])

    name = f"xcorr {c}ch {s}/{t}"
    return [(name + " fwd", setup, fwd), (name + " bwd", setup, bwd)]


def resize_case(c, src, dst):
    def setup(rng, dt):
        x = rng.standard_normal((c, src, src)).astype(dt)
        g = rng.standard_normal((c, dst, dst)).astype(dt)
        return x, g, T._resize_tables(x.shape, (c, dst, dst), x.dtype)

    def fwd(K, x, g, tables):
        return K.resize_forward(x, *tables, np.zeros_like(g))

    def bwd(K, x, g, tables):
        return K.resize_backward(g, *tables, np.zeros_like(x))

    name = f"resize {c}ch {src}->{dst}"
    return [(name + " fwd", setup, fwd), (name + " bwd", setup, bwd)]


def cases(quick):
    if quick:
        return conv_case(8, 8, 27, 3, 1, 0) + xcorr_case(8, 14, 6) + resize_case(8, 21, 27)
    return (conv_case(3, 8, 63, 3, 2, 0) + conv_case(8, 8, 27, 3, 1, 0) + conv_case(4, 4, 27, 3, 2, 1)
            + conv_case(32, 64, 60, 3, 1, 0) + conv_case(64, 64, 44, 3, 2, 1)
            + xcorr_case(8, 14, 6) + xcorr_case(256, 44, 12) + resize_case(96, 65, 87))


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    ap.add_argument("--quick", action="store_true", help="small shapes only")
    args = ap.parse_args(argv)

    nb, npy = get_backend("numba"), get_backend("numpy")
    dt = np.dtype(args.dtype)
    print(f"{'case':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agreement")
    for name, setup, fn in cases(args.quick):
        inputs = setup(np.random.default_rng(0), dt)
        fn(nb, *inputs)  # compile outside the timed region
        t_nb, out_nb = best_of(lambda *a: fn(nb, *a), inputs, args.repeat)
        t_np, out_np = best_of(lambda *a: fn(npy, *a), inputs, args.repeat)
        if np.array_equal(out_nb, out_np):
            agree = "bitwise"
        else:
            a, b = np.asarray(out_nb, np.float64), np.asarray(out_np, np.float64)
            agree = f"rel {np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30):.1e}"
        if name.endswith("fwd") and agree != "bitwise":
            agree += "  <- forward mismatch"
        print(f"{name:40s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}  {agree}")


if __name__ == "__main__":
    main()
