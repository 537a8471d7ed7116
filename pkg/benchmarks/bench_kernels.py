"""Compiled vs pure-Python kernel timings.

Run after an editable install::

    python3 benchmarks/bench_kernels.py [--repeat 7] [--json]

Each kernel is fed identical inputs on both backends; outputs are checked for
bitwise equality before anything is timed.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from gaitdiag import kernels, synth
from gaitdiag.anomaly import PAIRS, PRESET_INDICES
from gaitdiag.signal import design_butterworth


def _cases(rng):
    sos = design_butterworth().sections
    window = synth.generate_array(synth.draw_profile(synth.GaitLabel.RUN, rng), 3.0)

    layers = []
    sizes = (222, 20, 10, 5)
    for i in range(3):
        w = rng.integers(-127, 128, (sizes[i], sizes[i + 1]), dtype=np.int8)
        b = rng.integers(-5000, 5000, sizes[i + 1]).astype(np.int32)
        layers.append((w, b, int(rng.integers(-128, 0)), int(rng.integers(2**30, 2**31)), 40, -20, i < 2))
    x = rng.normal(size=222)

    points = rng.normal(size=(300, 2))
    centroids = rng.normal(size=(32, 2))
    features = rng.normal(size=222)
    mean, std = np.zeros(4), np.ones(4)
    pair_cols = np.array(PAIRS, dtype=np.int64)
    pair_centroids = rng.normal(size=(6, 32, 2))
    indices = np.array(PRESET_INDICES, dtype=np.int64)

    def mlp(impl):
        runner = impl.Int8Mlp(0.05, -3, layers)
        return lambda: runner.run(x)

    return {
        "sos_filter 6x177": lambda impl: (lambda: impl.sos_filter(window, sos)),
        "int8 mlp 222-20-10-5": mlp,
        "assign 300x32": lambda impl: (lambda: impl.assign(points, centroids)),
        "pair_distances 6x32": lambda impl: (
            lambda: impl.pair_distances(features, indices, mean, std, pair_cols, pair_centroids)),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    return a == b


def _best_us(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number * 1e6


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--json", action="store_true")
    args = parser.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernels are not available; build the extension first", file=sys.stderr)
        return 1

    rows = []
    for name, make in _cases(np.random.default_rng(0)).items():
        fast, slow = make(kernels.compiled), make(kernels.fallback)
        if not _same(fast(), slow()):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        c_us, p_us = _best_us(fast, args.repeat), _best_us(slow, args.repeat)
        rows.append({"kernel": name, "compiled_us": c_us, "python_us": p_us, "speedup": p_us / c_us})

    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'kernel':<24}{'compiled us':>13}{'python us':>12}{'speedup':>9}")
        for r in rows:
            print(f"{r['kernel']:<24}{r['compiled_us']:>13.2f}{r['python_us']:>12.2f}{r['speedup']:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
