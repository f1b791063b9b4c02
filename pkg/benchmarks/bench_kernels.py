"""Time the hot kernels and one training epoch under both backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Numba timings exclude the first (compiling) call.
"""
import argparse
import time
import timeit

import numpy as np

from ccb import kernels
from ccb.bias import estimate_bias
from ccb.dataset import ShiftSpec, generate_toy_dataset
from ccb.training import TrainConfig, train


def cases(rng):
    B, R, d, dq, A = 64, 6, 40, 32, 32
    vp = np.tanh(rng.normal(size=(B, R, d)))
    keys = rng.normal(size=(B, R, dq))
    fq = rng.normal(size=(B, dq))
    alpha, _ = kernels.attention_forward(vp, keys, fq)
    dfv = rng.normal(size=(B, d))
    z, y, w = rng.normal(size=(B, A)), (rng.random((B, A)) < 0.1) * 1.0, rng.random((B, A))
    q, lab = rng.integers(0, 8, size=5000), rng.random((5000, A))
    return {
        "bce_rows": lambda: kernels.bce_rows(z, y, w),
        "attention_forward": lambda: kernels.attention_forward(vp, keys, fq),
        "attention_backward": lambda: kernels.attention_backward(vp, keys, fq, alpha, dfv),
        "type_label_mass": lambda: kernels.type_label_mass(q, lab, 8),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [False, True] if kernels.HAVE_NUMBA else [False]
    print(f"{'kernel':20s} " + " ".join(f"{('numba' if b else 'numpy') + ' us':>12s}" for b in backends))
    fns = cases(rng)
    for name, fn in fns.items():
        row = []
        for b in backends:
            with kernels.use_numba(b):
                fn()
                row.append(min(timeit.repeat(fn, number=50, repeat=args.repeat)) / 50 * 1e6)
        print(f"{name:20s} " + " ".join(f"{t:12.1f}" for t in row))

    tr, _ = generate_toy_dataset(ShiftSpec(n_train=2000, n_test=10))
    table = estimate_bias(tr)
    cfg = TrainConfig(epochs=1)
    row = []
    for b in backends:
        with kernels.use_numba(b):
            train(cfg, tr, table)
            t0 = time.perf_counter()
            train(cfg, tr, table)
            row.append(time.perf_counter() - t0)
    print(f"{'epoch (2k inst) s':20s} " + " ".join(f"{t:12.3f}" for t in row))


if __name__ == "__main__":
    main()
