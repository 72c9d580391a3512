"""Compare the compiled and numpy soft nearest-neighbor kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Times the forward and backward kernels at several batch shapes, checks that
both backends agree, then times a short end-to-end training run per backend
(each in a fresh interpreter, since the backend is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from nncsl.kernels import _fallback

try:
    from nncsl.kernels import _snn
except ImportError:
    _snn = None

SHAPES = [(32, 16, 32, 10), (128, 64, 64, 10), (512, 160, 128, 100)]  # queries, supports, dim, classes

TRAIN_SNIPPET = """
import time
from nncsl import experiment, kernels
from nncsl.trainer import run_stream
cfg = experiment.resolve_config({"num_tasks": 5})
run = experiment.train_config(cfg, "nncsl", 0).with_(epochs_per_task=2)
stream = experiment.build_stream(cfg, 0)
start = time.perf_counter()
run_stream(run, stream, learning_curve=False)
print(kernels.BACKEND, time.perf_counter() - start)
"""


def inputs(q, k, d, c, seed=0):
    rng = np.random.default_rng(seed)
    h, s = rng.normal(size=(q, d)), rng.normal(size=(k, d))
    y = rng.dirichlet(np.ones(c), size=k)
    return h, s, y


def time_backend(module, h, s, y, temp, repeat):
    probs, *cache = module.snn_forward(h, s, y, temp)
    grad = np.ones_like(probs) / probs.size
    fwd = min(timeit.repeat(lambda: module.snn_forward(h, s, y, temp), number=5, repeat=repeat)) / 5
    bwd = min(timeit.repeat(lambda: module.snn_backward(grad, y, *cache, temp), number=5, repeat=repeat)) / 5
    return probs, module.snn_backward(grad, y, *cache, temp), fwd, bwd


def kernel_table(repeat):
    print(f"{'shape (q,k,d,c)':22s} {'backend':8s} {'forward ms':>11s} {'backward ms':>12s}")
    for shape in SHAPES:
        h, s, y = inputs(*shape)
        results = {"numpy": time_backend(_fallback, h, s, y, 0.1, repeat)}
        if _snn is not None:
            results["cython"] = time_backend(_snn, h, s, y, 0.1, repeat)
        for name, (_, _, fwd, bwd) in results.items():
            print(f"{str(shape):22s} {name:8s} {1e3 * fwd:11.3f} {1e3 * bwd:12.3f}")
        if "cython" in results:
            a, b = results["numpy"], results["cython"]
            err = max(np.abs(a[0] - b[0]).max(), *(np.abs(x - z).max() for x, z in zip(a[1], b[1])))
            ratio = (a[2] + a[3]) / (b[2] + b[3])
            print(f"{'':22s} max backend difference {err:.1e}, cython speedup {ratio:.2f}x")


def training_table():
    print("\ndefault stream, 5 tasks at 2 epochs each:")
    for pure in ("", "1"):
        env = {**os.environ, "NNCSL_PURE_PYTHON": pure} if pure else {
            k: v for k, v in os.environ.items() if k != "NNCSL_PURE_PYTHON"
        }
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  {out[0]:8s} {float(out[1]):7.2f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args()
    if _snn is None:
        print("compiled extension not built; timing the numpy backend only")
    kernel_table(args.repeat)
    if not args.skip_training:
        training_table()


if __name__ == "__main__":
    main()
