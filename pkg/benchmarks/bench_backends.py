"""Timing comparison of the numba and numpy kernel backends.

Runs the two hot kernels (kernel-3 temporal convolution, LSTM gate
update) forward and backward at training-like shapes, then a full
optimization step on a desk-scale model, once per backend.

    python3 benchmarks/bench_backends.py [--repeats N]

The active backend can also be pinned process-wide with GMVC_BACKEND
(numba | numpy); this script switches explicitly via set_backend.
"""

import argparse
import time

import numpy as np

from gmvc import backend
from gmvc.model import SINGER, TECHNIQUE, build_model
from gmvc.nn import tensor as T
from gmvc.nn.optim import Adam
from gmvc.objective import total_objective
from gmvc.training import TrainConfig, variant_model


def timeit(fn, repeats):
    fn()  # warmup: first numba call pays the JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3  # ms


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    # shapes mirror one desk-scale batch: 64 chunks of 43 frames
    x = rng.standard_normal((64, 43, 96)).astype(np.float32)
    w = rng.standard_normal((3 * 96, 32)).astype(np.float32) * 0.05
    b = np.zeros(32, dtype=np.float32)
    gy = rng.standard_normal((64, 43, 32)).astype(np.float32)
    preact = rng.standard_normal((64, 4 * 256)).astype(np.float32)
    c_prev = rng.standard_normal((64, 256)).astype(np.float32)
    _, c_new, gates = backend.lstm_gates_forward(preact, c_prev)
    gh = rng.standard_normal((64, 256)).astype(np.float32)
    gc = rng.standard_normal((64, 256)).astype(np.float32)

    return {
        "conv1d forward": lambda: backend.conv1d_forward(x, w, b),
        "conv1d backward": lambda: backend.conv1d_backward(x, w, gy),
        "lstm gates forward": lambda: backend.lstm_gates_forward(preact, c_prev),
        "lstm gates backward": lambda: backend.lstm_gates_backward(
            gates, c_prev, c_new, gh, gc
        ),
    }


def bench_train_step(repeats):
    model_cfg = variant_model(
        "M2", latent_dim=8, singer_classes=4, technique_classes=3,
        conv_channels=32, rnn_hidden=16, bottleneck=32,
    )
    cfg = TrainConfig(variant="M2", model=model_cfg, batch_size=8)
    model = build_model(cfg.model, seed=0)
    optim = Adam(model.store, lr=cfg.lr)
    priors = (model.prior(SINGER), model.prior(TECHNIQUE))
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.0, 1.0, size=(8, 4, 43, 96)).astype(np.float32)
    y = (rng.integers(0, 4, size=8), rng.integers(0, 3, size=8))
    eps = (
        rng.standard_normal((8, 4, 8)).astype(np.float32),
        rng.standard_normal((8, 4, 8)).astype(np.float32),
    )

    def step():
        fwd = model.forward(x, mode="train", eps_override=eps)
        bd = total_objective(fwd, x, y, cfg.model, priors)
        T.backward(bd.node)
        optim.step()

    return {"full train step (B=8, N=4)": step}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    backends = ["numpy"]
    if backend.HAS_NUMBA:
        backends.insert(0, "numba")
    else:
        print("numba not importable; timing numpy only")

    results: dict = {}
    for name in backends:
        backend.set_backend(name)
        cases = {**bench_kernels(args.repeats), **bench_train_step(args.repeats)}
        for label, fn in cases.items():
            results.setdefault(label, {})[name] = timeit(fn, args.repeats)

    width = max(len(label) for label in results)
    header = f"{'case':<{width}} " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label, times in results.items():
        line = f"{label:<{width}} " + "".join(
            f"{times[b]:>10.3f}ms" for b in backends
        )
        if len(backends) == 2:
            line += f"{times['numpy'] / times['numba']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
