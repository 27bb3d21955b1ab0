"""Compare the compiled kernels against the numpy fallback.

Times the two hot paths (per-batch gradient computation during local
training, pairwise cosine matrices during conflict analysis) at the two
scales the bundled experiments use: the 2-feature toy domains and the
20-dimensional blob benchmark. Speedup is numpy time over compiled time,
so >1x means the extension wins.

Usage: python3 benchmarks/bench_backends.py [--repeat N]
"""

import argparse
import time

import numpy as np

from fedlag.kernels import available_backends, load_backend
from fedlag.nn import ACTIVATIONS, MlpSpec, init_model

SCALES = {
    # (model spec, batch size, cosine-matrix rows: clients x layer params)
    "toy": (MlpSpec(2, (8, 4), 2), 16, (4, 32)),
    "blobs": (MlpSpec(20, (64, 32), 10), 32, (20, 2048)),
}


def time_call(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(backend, spec, batch, cosine_shape, repeat):
    g = np.random.default_rng(0)
    model = init_model(spec, 0)
    num_layers = len(spec.dims()) - 1
    ws = [model[2 * j].values.reshape(model[2 * j].shape) for j in range(num_layers)]
    bs = [model[2 * j + 1].values for j in range(num_layers)]
    x = g.normal(size=(batch, spec.input_dim))
    y = g.integers(0, spec.num_classes, size=batch)
    act = ACTIVATIONS[spec.activation]
    rows = g.normal(size=cosine_shape)

    n_calls = 200

    def many_grads():
        for _ in range(n_calls):
            backend.grads(x, y, ws, bs, act)

    def many_cosines():
        for _ in range(n_calls):
            backend.cosine_matrix(rows)

    return {
        "batch grads": time_call(many_grads, repeat) / n_calls * 1e6,
        "cosine matrix": time_call(many_cosines, repeat) / n_calls * 1e6,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="best-of repetitions")
    args = parser.parse_args()

    names = available_backends()
    print(f"backends available: {names}")
    if len(names) < 2:
        print("compiled extension not built; run pip install -e . to build it")

    for scale, (spec, batch, cosine_shape) in SCALES.items():
        results = {
            name: bench(load_backend(name), spec, batch, cosine_shape, args.repeat)
            for name in names
        }
        dims = "x".join(str(d) for d in spec.dims())
        print(f"\n[{scale}] mlp {dims}, batch {batch}, "
              f"cosines {cosine_shape[0]}x{cosine_shape[1]}")
        print(f"{'kernel':<14}" + "".join(f"{n:>14}" for n in names) + "   speedup")
        for label in ("batch grads", "cosine matrix"):
            line = f"{label:<14}"
            for n in names:
                line += f"{results[n][label]:>12.1f}us"
            if len(names) == 2:
                line += f"   {results['numpy'][label] / results['compiled'][label]:.2f}x"
            print(line)


if __name__ == "__main__":
    main()
