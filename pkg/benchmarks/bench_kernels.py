"""Time the numpy and numba kernel implementations side by side.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from ndiv import kernels
from ndiv.data import StarSpec


def cases(rng):
    x10 = rng.normal(size=(10, 2))
    x64 = rng.normal(size=(64, 2))
    d64 = kernels.IMPLEMENTATIONS["numpy"]["pairwise_distances"](x64)
    g64 = rng.normal(size=(64, 64))
    pts = rng.normal(size=(10_000, 2))
    spec = StarSpec()
    return {
        "pairwise_distances N=10": ("pairwise_distances", (x10,)),
        "pairwise_distances N=64": ("pairwise_distances", (x64,)),
        "pairwise_distances_vjp N=64": ("pairwise_distances_vjp", (x64, d64, g64)),
        "histogram2d 10k pts, 64 bins": ("histogram2d", (pts, -3.0, 3.0, -3.0, 3.0, 64)),
        "star_membership 10k pts": (
            "star_membership",
            (pts, 0.0, 0.0, spec.arms, spec.r_inner, spec.r_outer, spec.rotation),
        ),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    backends = [b for b in ("numpy", "numba") if b in kernels.IMPLEMENTATIONS]
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':34s}" + "".join(f"{b:>14s}" for b in backends) + f"{'speedup':>10s}")
    for label, (name, inputs) in cases(np.random.default_rng(0)).items():
        times = []
        for b in backends:
            fn = kernels.IMPLEMENTATIONS[b][name]
            fn(*inputs)  # compile / warm up
            number = max(1, args.repeat)
            best = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=5)) / number
            times.append(best)
        speedup = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else ""
        print(f"{label:34s}" + "".join(f"{t * 1e6:12.1f}us" for t in times) + f"{speedup:>10s}")


if __name__ == "__main__":
    main()
