"""Time the compiled kernels against the numpy/scipy fallback.

    python3 benchmarks/bench_kernels.py --size 2048 --repeat 5
"""

import argparse
import timeit

import numpy as np

from callosum import kernels


def cases(size, rng):
    labels = rng.integers(0, 3, (size, size)).astype(np.uint8)
    blobs = (rng.random((size, size)) < 0.45).astype(np.uint8)
    tile = rng.random((2, 1024, 1024)).astype(np.float32)
    weights = rng.random((1024, 1024))
    canvas = np.zeros((2, 1024 + 512, 1024 + 512))
    return {
        "majority_downsample x4": lambda b: kernels.majority_downsample(labels, 4, backend=b),
        "label8 (45% fill)": lambda b: kernels.label8(blobs, 1, backend=b),
        "blend_accumulate 1024": lambda b: kernels.blend_accumulate(canvas, tile, weights, 256, 256, backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=2048, help="side of the square test masks")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = ["python"] + (["cython"] if kernels._compiled is not None else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(args.size, rng).items():
        best = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends}
        row = f"{name:<26}" + "".join(f"{best[b] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{best['python'] / best['cython']:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
