"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each row is the best of ``--repeat`` timings (ms). The last block times a
full forward/backward of the default detector through each backend and the
space-to-depth layout against the strided slice-and-concat formulation.
"""

import argparse
import json
import timeit

import numpy as np

from prnet import kernels
from prnet.detector import ArchConfig, assign_targets, build_model, detection_loss, forward
from prnet.tensor import Tensor


def _best(fn, repeat, number=3):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e3


def kernel_cases(rng):
    x = rng.standard_normal((8, 32, 64, 64)).astype(np.float32)
    w = rng.standard_normal((64, 3, 3)).astype(np.float32)  # multiplier 2
    y = rng.standard_normal((8, 64, 64, 64)).astype(np.float32)
    cols = np.ascontiguousarray(rng.standard_normal((8, 32 * 9, 64 * 64)).astype(np.float32))
    z = rng.standard_normal((8, 128, 32, 32)).astype(np.float32)
    return {
        "im2col 8x32x64x64 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 8x32x64x64 k3": lambda k: k.col2im(cols, 32, 64, 64, 3, 3, 1, 1),
        "depthwise fwd d=2": lambda k: k.depthwise_forward(x, w, 1, 1),
        "depthwise bwd d=2": lambda k: k.depthwise_backward(x, w, y, 1, 1),
        "pixel_unshuffle r=2": lambda k: k.pixel_unshuffle(x, 2),
        "pixel_shuffle r=2": lambda k: k.pixel_shuffle(z, 2),
    }


def train_step_case(size):
    m = build_model(ArchConfig())
    x = Tensor(np.random.default_rng(0).random((2, 3, size, size)).astype(np.float32))
    t = assign_targets([[], []], size)

    def run(_):
        detection_loss(forward(m, x), t).total.backward()
    return run


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128, help="image size for the end-to-end row")
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    names = sorted(backends)
    cases = kernel_cases(np.random.default_rng(0))
    cases[f"forward+backward {args.size}px"] = train_step_case(args.size)
    results = {}
    for case, fn in cases.items():
        row = {}
        for b in names:
            with kernels.use_backend(b) as mod:
                row[b] = _best(lambda: fn(mod), args.repeat, 1 if case.startswith("forward") else 3)
        results[case] = row

    x = np.random.default_rng(1).standard_normal((8, 32, 64, 64)).astype(np.float32)
    results["slice-concat r=2 (numpy)"] = {"numpy": _best(lambda: np.concatenate(
        [x[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)], axis=1), args.repeat)}

    width = max(len(c) for c in results)
    cols = names + ["speedup"]
    print(f"{'case':<{width}}  " + "  ".join(f"{c:>9}" for c in cols))
    for case, row in results.items():
        cells = [f"{row[b]:9.3f}" if b in row else f"{'-':>9}" for b in names]
        if "python" in row and "cython" in row:
            cells.append(f"{row['python'] / row['cython']:8.2f}x")
        elif "numpy" in row:
            cells = [f"{row['numpy']:9.3f}"] + [f"{'-':>9}"] * (len(names) - 1) + [f"{'-':>9}"]
        else:
            cells.append(f"{'-':>9}")
        print(f"{case:<{width}}  " + "  ".join(cells))
    print("times in ms, best of", args.repeat)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
