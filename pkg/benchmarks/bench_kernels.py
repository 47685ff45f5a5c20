"""Compare the compiled and numpy kernel backends.

Times each hot kernel at shapes met in a D4 nf8 mantis on 64 x 64 chips,
then one full training step of that network, under both backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 4]
"""
import argparse
import time

import numpy as np

from mantis_cd.mantis import Mantis, MantisConfig
from mantis_cd.pipeline import stack_batch, synth_dataset
from mantis_cd.substrate import kernels
from mantis_cd.trainer import Adam, multitask_loss


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(batch, rng):
    cases = []
    for c, n in ((8, 64), (32, 16), (64, 8)):
        xp = rng.standard_normal((batch, c, n + 2, n + 2))
        cols = np.ascontiguousarray(kernels.python_kernels.im2col(xp, 3, 1, n, n))
        cases.append((f"im2col   c={c:<3d} {n}x{n}", lambda m, xp=xp, n=n: m.im2col(xp, 3, 1, n, n)))
        cases.append((f"col2im   c={c:<3d} {n}x{n}",
                      lambda m, cols=cols, c=c, n=n: m.col2im(cols, batch, c, n + 2, n + 2, 3, 1, n, n)))
    for c, n in ((16, 32), (64, 8)):
        x = rng.standard_normal((batch, c, n, n))
        g = rng.standard_normal((batch, c, 2 * n, 2 * n))
        cases.append((f"upsample c={c:<3d} {n}x{n}", lambda m, x=x: m.upsample2x(x)))
        cases.append((f"up-back  c={c:<3d} {n}x{n}", lambda m, g=g: m.upsample2x_backward(g)))
    return cases


def train_step(model, batch):
    opt = Adam(model.parameters(), lr=1e-4)

    def step():
        opt.zero_grad()
        loss = multitask_loss(model(batch["t1"], batch["t2"]), batch, 5)
        loss.backward()
        opt.step()

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=4)
    args = parser.parse_args()
    if kernels.compiled_kernels is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    backends = {"python": kernels.python_kernels, "cython": kernels.compiled_kernels}

    print(f"{'kernel':<26} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in kernel_cases(args.batch, rng):
        t = {b: best_of(lambda: fn(m), args.repeat) for b, m in backends.items()}
        print(f"{name:<26} {t['python'] * 1e3:10.3f} {t['cython'] * 1e3:10.3f} {t['python'] / t['cython']:8.2f}")

    batch = stack_batch(synth_dataset(args.batch, 64, seed=0))
    model = Mantis(MantisConfig(depth=4, nf=8, seed=0))
    step = train_step(model, batch)
    t = {}
    for b in backends:
        previous = kernels.use_backend(b)
        try:
            step()
            t[b] = best_of(step, max(1, args.repeat // 2))
        finally:
            kernels.use_backend(previous)
    print(f"{'D4nf8 train step':<26} {t['python'] * 1e3:10.1f} {t['cython'] * 1e3:10.1f} {t['python'] / t['cython']:8.2f}")


if __name__ == "__main__":
    main()
