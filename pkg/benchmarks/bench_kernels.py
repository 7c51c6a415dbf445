"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from dccmapf import kernels


def cases(rng):
    obstacles = (rng.random((40, 40)) < 0.3).astype(np.uint8)
    obstacles[0, 0] = 0
    dist = kernels.python_backend.bfs_distance(obstacles, 0, 0)
    free = np.argwhere(obstacles == 0)
    pos = free[rng.choice(len(free), 16, replace=False)].astype(np.int64)
    acts = rng.integers(0, 5, 16).astype(np.int64)
    x = rng.normal(size=(64, 9, 9, 32)).astype(np.float32)
    cols = rng.normal(size=(64 * 81, 9 * 32)).astype(np.float32)
    return {
        "bfs_distance 40x40": lambda b: b.bfs_distance(obstacles, 0, 0),
        "heuristic_planes 40x40": lambda b: b.heuristic_planes(obstacles, dist),
        "resolve_moves 16 agents": lambda b: b.resolve_moves(pos, acts, obstacles),
        "im2col 64x9x9x32": lambda b: b.im2col(x, 3),
        "col2im 64x9x9x32": lambda b: b.col2im(cols, 64, 9, 9, 32, 3),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled backend not built; only the fallback can be timed", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':26s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        timing = {}
        for label, backend in (("python", kernels.python_backend), ("compiled", kernels.compiled_backend)):
            if backend is None:
                continue
            number = 3
            best = min(timeit.repeat(lambda: fn(backend), number=number, repeat=args.repeat)) / number
            timing[label] = best * 1e3
        speed = timing["python"] / timing["compiled"] if "compiled" in timing else float("nan")
        print(f"{name:26s} {timing['python']:10.3f} {timing.get('compiled', float('nan')):12.3f} {speed:8.1f}x")
        rows.append({"kernel": name, **{f"{k}_ms": v for k, v in timing.items()}, "speedup": speed})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
