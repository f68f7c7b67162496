"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel timings and speedups, then the time of one full local SGD
step under each backend (each measured in a fresh interpreter, since the
backend is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedal import _kernels_py as py

try:
    from fedal import _kernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import timeit
import numpy as np
from fedal import kernels
from fedal.config import RunConfig
from fedal.model import ClientModel, local_train
from fedal.orchestrator import make_shards
cfg = RunConfig()
shard = make_shards(cfg)[0]
m = ClientModel.create(cfg.backbone, 0)
m.bias.b_global = np.zeros(cfg.backbone.d_model)
run = lambda: local_train(m, shard, 1, 0.01, 0.1, 0.75, 4, 0, batch_size=8)
run()
n_steps = len(shard) // 8
t = min(timeit.repeat(run, number=1, repeat={repeat})) / n_steps
print(kernels.BACKEND, t)
"""


def cases(rng):
    x2 = rng.standard_normal((8 * 16, 32))
    g2 = rng.standard_normal(x2.shape)
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    att = rng.standard_normal((8 * 2 * 16, 16))
    x3 = rng.standard_normal((8, 16, 32))
    g3 = rng.standard_normal(x3.shape)
    ff = rng.standard_normal((8 * 16, 128))
    return {
        "layernorm_forward": lambda k: k.layernorm_forward(x2, gamma, beta, 1e-5),
        "layernorm_backward": lambda k: k.layernorm_backward(
            g2, *k.layernorm_forward(x2, gamma, beta, 1e-5)[1:], gamma),
        "softmax_forward": lambda k: k.softmax_forward(att),
        "softmax_backward": lambda k: k.softmax_backward(att, k.softmax_forward(att)),
        "gelu_forward": lambda k: k.gelu_forward(ff),
        "gelu_backward": lambda k: k.gelu_backward(ff, ff),
        "moving_average": lambda k: k.moving_average(x3, 4),
        "moving_average_backward": lambda k: k.moving_average_backward(g3, 4),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=args.number, repeat=args.repeat)) / args.number
        if cy is None:
            print(f"{name:26s} {1e6 * t_py:10.1f} {'n/a':>10s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:26s} {1e6 * t_py:10.1f} {1e6 * t_cy:10.1f} {t_py / t_cy:8.2f}")

    print("\nfull local SGD step (batch 8, d_model 32, 2 layers):")
    steps = {}
    for backend in ("python", "cython"):
        env = dict(os.environ, FEDAL_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=args.repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        steps[out[0]] = float(out[1])
        print(f"  {out[0]:8s} {1e3 * float(out[1]):8.2f} ms")
    if len(steps) == 2:
        print(f"  speedup  {steps['python'] / steps['cython']:8.2f}x")


if __name__ == "__main__":
    main()
