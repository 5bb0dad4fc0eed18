"""Compiled vs numpy event-driven convolution, plus the dense reference.

    python benchmarks/bench_kernels.py [--repeat 5] [--density 0.05,0.1,0.3]
"""

import argparse
import time

import numpy as np

from radarsnn import kernels
from radarsnn.ops import conv3d, event_conv3d


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--density", default="0.02,0.05,0.1,0.3")
    p.add_argument("--shape", default="8,16,48,48", help="Cin,Z,Y,X")
    p.add_argument("--cout", type=int, default=16)
    args = p.parse_args(argv)

    cin, z, y, x = (int(v) for v in args.shape.split(","))
    rng = np.random.default_rng(0)
    w = rng.normal(size=(args.cout, cin, 3, 3, 3)).astype(np.float32)
    print(f"backends: {', '.join(kernels.BACKENDS)} (default {kernels.BACKEND})")
    print(f"input ({cin},{z},{y},{x}) -> {args.cout} channels, k=3, best of {args.repeat}")
    print(f"{'density':>8} {'dense ms':>9} " + " ".join(f"{name + ' ms':>12}" for name in kernels.BACKENDS)
          + f" {'speedup':>8}")
    for density in (float(d) for d in args.density.split(",")):
        spikes = (rng.random((1, cin, z, y, x)) < density).astype(np.float32)
        dense = best_of(lambda: conv3d(spikes, w, padding=1), args.repeat)
        timings = {name: best_of(lambda: event_conv3d(spikes, w, padding=1, backend=name, check=False),
                                 args.repeat)
                   for name in kernels.BACKENDS}
        ref = conv3d(spikes, w, padding=1)
        for name in kernels.BACKENDS:
            got = event_conv3d(spikes, w, padding=1, backend=name)
            assert np.array_equal(got, ref) or np.allclose(got, ref, rtol=1e-6), name
        speedup = timings["python"] / timings["compiled"] if "compiled" in timings else float("nan")
        print(f"{density:>8.2f} {dense * 1e3:>9.2f} "
              + " ".join(f"{timings[name] * 1e3:>12.2f}" for name in kernels.BACKENDS)
              + f" {speedup:>7.1f}x")


if __name__ == "__main__":
    main()
