"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

A second section times ``solve_lower_many`` end to end in a subprocess per
backend, since the backend is fixed at import time by ``BDFOA_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from bdfoa import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    v1 = rng.standard_normal((2000, 4001)).cumsum(axis=1)
    v2 = rng.standard_normal((50, 401 * 401))
    g = rng.standard_normal((2000, 4001))
    pts = rng.random((3000, 2))
    A, B = rng.random((2000, 2)), rng.random((2000, 2))
    return {
        "local_minima_mask 1-D": lambda impl: impl["local_minima_mask"](v1, (4001,)),
        "local_minima_mask 2-D": lambda impl: impl["local_minima_mask"](v2, (401, 401)),
        "sign_change_mask": lambda impl: impl["sign_change_mask"](g),
        "cluster_labels": lambda impl: impl["cluster_labels"](pts, 0.02),
        "hausdorff": lambda impl: impl["hausdorff"](A, B),
    }


END_TO_END = """
import time, numpy as np
from bdfoa import builtin
from bdfoa.lower import solve_lower_many
p = builtin("mirrlees")
X = np.linspace(0.5, 1.5, 2000)[:, None]
solve_lower_many(p, X[:10])
t0 = time.perf_counter(); solve_lower_many(p, X); print(time.perf_counter() - t0)
"""


def end_to_end(flag):
    env = dict(os.environ, BDFOA_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, call in cases(rng).items():
        t_np = best_of(lambda: call(K.numpy_impl), args.repeat)
        t_nb = best_of(lambda: call(K.numba_impl), args.repeat)
        print(f"{name:<24}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}")
    t_np, t_nb = end_to_end("0"), end_to_end("1")
    print(f"{'solve_lower_many x2000':<24}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
