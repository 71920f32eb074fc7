"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Both implementations live side by side in ``specreg._kernels``, so one
process can time both regardless of ``SPECREG_DISABLE_JIT``.  Compilation is
excluded by a warm-up call.  Each row also reports the largest difference
between the two outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from specreg import _kernels as k


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    W = rng.standard_normal((256, 512))
    v0 = rng.standard_normal(512)
    v0 /= np.linalg.norm(v0)
    yield "power_iterate 256x512 x1", lambda f: f(W, v0, 1)[2], "power_iterate"
    yield "power_iterate 256x512 x50", lambda f: f(W, v0, 50)[2], "power_iterate"

    for n in (32, 64, 128):
        A = rng.standard_normal((n, n))

        def jac(f, A=A, n=n):
            G, Vt = A.T.copy(), np.eye(n)
            f(G, Vt, n * np.finfo(float).eps, 100)
            return np.sort(np.linalg.norm(G, axis=1))

        yield f"jacobi_sweeps {n}x{n}", jac, "jacobi_sweeps"

    xp = rng.standard_normal((64, 16, 18, 18))
    yield "im2col 64x16x16x16 k3", lambda f: f(xp, 3, 3, 1, 16, 16), "im2col"
    cols = rng.standard_normal((64 * 16 * 16, 16 * 9))
    yield "col2im 64x16x16x16 k3", lambda f: f(cols, 64, 16, 18, 18, 3, 3, 1, 16, 16), "col2im"


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for label, call, name in cases(rng):
        f_np, f_nb = getattr(k, f"{name}_numpy"), getattr(k, f"{name}_numba")
        diff = float(np.max(np.abs(call(f_np) - call(f_nb))))  # also compiles
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        print(f"{label:<28}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
