"""Compare the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--resolution 64]

Each timing is the best of ``--repeat`` runs after one warm-up call (which
also triggers numba compilation). The ConvLSTM row is one full-batch
training epoch at default widths on the moving-square sequence.
"""

import argparse
import time

import numpy as np

from nextframe import _kernels, data
from nextframe.model import ModelConfig, build_model
from nextframe.tensor import conv2d, conv2d_grad, maxpool2d, maxpool2d_backward
from nextframe.training import fit


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(res):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 17, res, res)).astype(np.float32)
    k = rng.standard_normal((64, 17, 3, 3)).astype(np.float32)
    up = rng.standard_normal((20, 64, res, res)).astype(np.float32)
    pool_in = rng.standard_normal((20, 16, res, res)).astype(np.float32)
    pooled, argmax = maxpool2d(pool_in)

    seq = data.synth_sequence("moving_square", 30, res, seed=0)
    train, _ = data.chrono_split(data.make_windows(seq, 5), 0.8)
    cfg = ModelConfig("conv_lstm", resolution=res, epochs=1)

    def convlstm_epoch():
        fit(build_model(cfg), train, None, cfg)

    return {
        "conv2d forward": lambda: conv2d(x, k),
        "conv2d backward": lambda: conv2d_grad(x, k, up),
        "maxpool forward": lambda: maxpool2d(pool_in),
        "maxpool backward": lambda: maxpool2d_backward(pooled, argmax, pool_in.shape),
        "convlstm epoch": convlstm_epoch,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--resolution", type=int, default=64)
    args = parser.parse_args()

    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    results = {}
    for backend in backends:
        _kernels.BACKEND = backend
        for name, fn in cases(args.resolution).items():
            repeat = 1 if name == "convlstm epoch" else args.repeat
            results[(name, backend)] = best_of(fn, repeat)

    print(f"{'case':<18}" + "".join(f"{b + ' (s)':>14}" for b in backends) + f"{'speedup':>10}")
    for name in cases(args.resolution):
        row = [results[(name, b)] for b in backends]
        speedup = f"{row[0] / row[-1]:>9.2f}x" if len(row) > 1 else ""
        print(f"{name:<18}" + "".join(f"{t:>14.4f}" for t in row) + speedup)


if __name__ == "__main__":
    main()
