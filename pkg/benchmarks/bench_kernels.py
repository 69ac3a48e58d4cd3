"""Time each hot kernel on its numpy path and its numba path.

    python benchmarks/bench_kernels.py [--repeat 20]

Numba timings exclude the first (compiling) call. Outputs are checked for
agreement before timing, so a fast but wrong kernel shows up as an error.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from camfusion import _kernels as K


def _inputs(rng):
    x = rng.standard_normal((512, 1024))
    g = rng.standard_normal((512, 1024))
    gain, bias = rng.standard_normal(1024), rng.standard_normal(1024)
    _, xhat, inv_std = K.layer_norm_forward_np(x, gain, bias, 1e-5)
    sets = [np.unique(rng.integers(0, 20000, size=int(rng.integers(50, 500)))) for _ in range(120)]
    lengths = np.array([len(s) for s in sets])
    ptr = np.concatenate([[0], np.cumsum(lengths)])
    flat = np.concatenate(sets)
    return {
        "gelu_forward": (x,),
        "gelu_backward": (x, g),
        "layer_norm_forward": (x, gain, bias, 1e-5),
        "layer_norm_backward": (g, xhat, inv_std, gain),
        "l1_cost": (np.ascontiguousarray(rng.standard_normal((10, 256))),),
        "intersection_counts": (flat, ptr, flat, ptr),
    }


def _best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(u, v, rtol=1e-10, atol=1e-12) for u, v in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    inputs = _inputs(np.random.default_rng(0))
    print(f"backend in use: {K.BACKEND}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (np_fn, nb_fn) in K.KERNELS.items():
        a = inputs[name]
        t_np = _best_of(np_fn, a, args.repeat)
        if nb_fn is None:
            print(f"{name:<22}{t_np * 1e3:>10.3f}{'n/a':>10}{'':>9}")
            continue
        if not _same(np_fn(*a), nb_fn(*a)):
            raise SystemExit(f"{name}: numpy and numba outputs disagree")
        t_nb = _best_of(nb_fn, a, args.repeat)
        print(f"{name:<22}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
