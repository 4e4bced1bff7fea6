"""Compare the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times im2col, col2im and the nearest-neighbour warp on representative
shapes, then one forward/backward/Adam step of the default fusion model.
"""

import argparse
import timeit

import numpy as np

from fusionvote import kernels
from fusionvote import tensor as T
from fusionvote.model import FusionModel, ModelConfig
from fusionvote.training import Adam, cross_entropy_loss, one_hot, regularization_penalty


def kernel_cases(rng):
    x = rng.standard_normal((16, 16, 32, 32)).astype(np.float32)
    cols = kernels.BACKENDS["python"].im2col(x, 3, 1, 2, 2, 32, 32)
    img = rng.random((224, 224, 3)).astype(np.float32)
    theta = np.deg2rad(17.0)
    inv = np.array([[np.cos(theta), -np.sin(theta), 8.0], [np.sin(theta), np.cos(theta), -5.0]])
    return {
        "im2col 16x16x32x32 k3 d2": lambda: kernels.im2col(x, 3, 1, 2, 2, 32, 32),
        "col2im 16x16x32x32 k3 d2": lambda: kernels.col2im(cols, 32, 32, 1, 2, 2),
        "warp_nearest 224x224x3": lambda: kernels.warp_nearest(img, inv),
    }


def train_step_case(rng):
    model = FusionModel(ModelConfig(num_classes=8, image_size=32))
    opt = Adam(list(model.named_parameters()))
    x = T.Tensor(rng.random((16, 3, 32, 32)).astype(np.float32))
    y = one_hot(rng.integers(0, 8, size=16), 8)

    def step():
        model.zero_grad()
        loss = cross_entropy_loss(T.softmax(model(x)), y) + regularization_penalty(model)
        loss.backward()
        opt.step()

    return {"train step (batch 16, 32x32)": step}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is reported")
    args = p.parse_args(argv)
    backends = [b for b in ("python", "compiled") if b in kernels.BACKENDS]
    if "compiled" not in backends:
        print("compiled kernels not built; only the numpy fallback is timed")
    original = kernels.BACKEND
    results: dict[str, dict[str, float]] = {}
    try:
        for backend in backends:
            kernels.use_backend(backend)
            rng = np.random.default_rng(0)
            cases = {**kernel_cases(rng), **train_step_case(rng)}
            for name, fn in cases.items():
                fn()  # warm-up
                best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
                results.setdefault(name, {})[backend] = best
    finally:
        kernels.use_backend(original)
    print(f"{'case':32s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, times in results.items():
        row = f"{name:32s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['compiled']:11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
