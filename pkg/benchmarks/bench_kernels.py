"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times im2col, col2im and crc64 from both backends on generator-sized inputs,
then one GAN training epoch under each backend (a subprocess with
``EXGEN_PURE_PYTHON=1`` for the fallback). Results are best-of-N seconds.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from exgen.substrate import _pykernels

try:
    from exgen.substrate import _ckernels
except ImportError:
    _ckernels = None

EPOCH_SNIPPET = """
import time
from exgen.dataset import synth_rainfall
from exgen.gan import TrainConfig, train_unconditional
from exgen.substrate.kernels import BACKEND
ds = synth_rainfall(512, 16, 16, seed=0)
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter()
    train_unconditional(ds, TrainConfig(epochs=1, batch=32))
    best = min(best, time.perf_counter() - t0)
print(BACKEND, best)
"""


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat: int):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 16, 8, 8)).astype(np.float32)
    cols = _pykernels.im2col(x, 4, 2, 1)
    blob = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    cases = [
        ("im2col (32x16x8x8, k4 s2 p1)", lambda m: m.im2col(x, 4, 2, 1), 50),
        ("col2im (same shape)", lambda m: m.col2im(cols, x.shape, 4, 2, 1), 50),
        ("crc64 (1 MiB)", lambda m: m.crc64(blob), 3),
    ]
    for name, call, number in cases:
        py = best_of(lambda: call(_pykernels), repeat, number)
        cy = best_of(lambda: call(_ckernels), repeat, number) if _ckernels else float("nan")
        yield name, py, cy


def epoch_time(pure: bool, repeat: int) -> float:
    env = dict(os.environ, EXGEN_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(repeat=repeat)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return float(out[1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'operation':<32}{'numpy s':>12}{'cython s':>12}{'speedup':>10}")
    for name, py, cy in kernel_rows(args.repeat):
        print(f"{name:<32}{py:>12.6f}{cy:>12.6f}{py / cy:>10.2f}")
    py = epoch_time(True, min(args.repeat, 3))
    cy = epoch_time(False, min(args.repeat, 3)) if _ckernels else float("nan")
    print(f"{'train epoch (512 x 16x16)':<32}{py:>12.4f}{cy:>12.4f}{py / cy:>10.2f}")


if __name__ == "__main__":
    main()
