"""Benchmark the numba kernels against the pure-numpy fallback on the
similarity forward/backward passes that dominate training time.

Run:  python3 benchmarks/bench_kernels.py [--quick]
"""
import argparse
import time

import numpy as np

from capvid import kernels


def build_case(rng, b, n, l, d):
    frames = [rng.standard_normal((n, d)) for _ in range(b)]
    caps = [rng.standard_normal((l, d)) for _ in range(b)]
    vis, vis_off = kernels.pack_groups(frames)
    cap, cap_off = kernels.pack_groups(caps)
    capw = np.full(cap.shape[0], 1.0 / l)
    dphi = rng.standard_normal((b, b))
    return vis, vis_off, cap, cap_off, capw, dphi


def bench(fn, args, repeats):
    fn(*args)  # warm up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true",
                        help="skip the paper-scale case")
    opts = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = [("synthetic scale (B=16, N=5, L=4, d=32)", 16, 5, 4, 32, 20)]
    if not opts.quick:
        cases.append(("paper scale (B=64, N=10, L=4, d=512)", 64, 10, 4, 512, 3))

    impls = [("numpy", kernels._phi_forward_np, kernels._phi_backward_np)]
    if kernels._HAVE_NUMBA:
        impls.append(("numba", kernels._phi_forward_nb, kernels._phi_backward_nb))
    else:
        print("numba unavailable; benchmarking the numpy path only")

    print(f"{'case':<42} {'pass':<9} " +
          " ".join(f"{name:>10}" for name, _, _ in impls) + f" {'speedup':>9}")
    for label, b, n, l, d, repeats in cases:
        vis, vis_off, cap, cap_off, capw, dphi = build_case(rng, b, n, l, d)
        fwd_args = (vis, vis_off, cap, cap_off, capw, 0.1)
        bwd_args = (*fwd_args, dphi)
        for pass_name, arg_tuple, which in (("forward", fwd_args, 1),
                                            ("backward", bwd_args, 2)):
            times = []
            for _, fwd, bwd in impls:
                fn = fwd if which == 1 else bwd
                times.append(bench(fn, arg_tuple, repeats))
            ratio = times[0] / times[-1] if len(times) > 1 else float("nan")
            print(f"{label:<42} {pass_name:<9} " +
                  " ".join(f"{t * 1e3:>9.2f}ms" for t in times) +
                  f" {ratio:>8.1f}x")


if __name__ == "__main__":
    main()
