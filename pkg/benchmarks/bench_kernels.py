"""Time each numba kernel against its numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

The training-step line runs in subprocesses, once with BARBERT_NO_NUMBA=1,
so it measures the whole encoder with each backend selected by the env flag.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from barbert import _kernels

STEP_SNIPPET = """
import time
from barbert.encoder import ModelConfig
from barbert.synth import synth_corpus
from barbert.trainer import TrainConfig, train
bars, _ = synth_corpus(20, 2, seed=0)
cfg = TrainConfig(variant="aug", steps=1, batch_size=16, validation_fraction=0.0)
train(bars, ModelConfig(), cfg)  # compile
cfg = TrainConfig(variant="aug", steps=5, batch_size=16, validation_fraction=0.0)
t = time.perf_counter()
train(bars, ModelConfig(), cfg)
print((time.perf_counter() - t) / 5)
"""


def best_of(fn, repeat):
    fn()  # warm up (and compile on the numba path)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    em = rng.integers(-100, 100, size=(2000, 4, 85))
    X = rng.standard_normal((2000, 128))
    C = rng.standard_normal((100, 128))
    on = rng.integers(0, 192, 40)
    off = on + rng.integers(1, 96, 40)
    pcs = rng.integers(0, 12, 40)
    x = rng.standard_normal((4, 96, 512))
    s = rng.standard_normal((4, 4, 96, 96))
    valid = rng.random((4, 96)) < 0.9
    probs = _kernels.masked_softmax(s, valid, 0.17, "numpy")
    return {
        "viterbi_batch (2000 bars)": lambda b: _kernels.viterbi_batch(em, 48, b),
        "kmeans_assign (2000x100x128)": lambda b: _kernels.kmeans_assign(X, C, b),
        "beat_chroma (40 notes)": lambda b: _kernels.beat_chroma(on, off, pcs, 4, 48, b),
        "gelu (4x96x512)": lambda b: _kernels.gelu(x, b),
        "gelu_backward (4x96x512)": lambda b: _kernels.gelu_backward(x, x, x, b),
        "masked_softmax (4x4x96x96)": lambda b: _kernels.masked_softmax(s, valid, 0.17, b),
        "softmax_backward (4x4x96x96)": lambda b: _kernels.softmax_backward(probs, s, 0.17, b),
    }


def step_time(no_numba: bool) -> float:
    env = dict(os.environ, BARBERT_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is unavailable (or BARBERT_NO_NUMBA is set); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        print(f"{name:32s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.1f}x")
    if not args.skip_step:
        t_np, t_nb = step_time(True), step_time(False)
        print(f"{'train step (aug, batch 16)':32s} {1e3 * t_np:10.1f} {1e3 * t_nb:10.1f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
