"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py            # per-kernel table
    python3 benchmarks/bench_kernels.py --train    # also one training step per backend

Each kernel is warmed up once (JIT compile) before timing. Outputs are
compared so a fast-but-wrong kernel shows up as a mismatch.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from unet_gnn.kernels import numba_impl, numpy_impl


def cases(rng):
    x = rng.normal(size=(4, 16, 66, 66)).astype(np.float32)
    cols = numpy_impl.im2col(x, 3, 3, 1)
    pool_in = rng.normal(size=(4, 16, 64, 64)).astype(np.float32)
    _, arg = numpy_impl.maxpool2_forward(pool_in)
    grad_pool = rng.normal(size=(4, 16, 32, 32)).astype(np.float32)
    coords = rng.normal(size=(256, 2)) * 8
    nbrs = numpy_impl.knn_select(coords, 8)
    values = rng.normal(size=(4, 256, 128)).astype(np.float32)
    t = rng.integers(0, 10, size=256 * 256 * 4)
    p = rng.integers(0, 10, size=256 * 256 * 4)
    return {
        "im2col": (x, 3, 3, 1),
        "col2im": (cols, x.shape, 3, 3, 1),
        "maxpool2_forward": (pool_in,),
        "maxpool2_backward": (grad_pool, arg),
        "neighbor_sum": (values, nbrs),
        "neighbor_sum_transpose": (values, nbrs),
        "knn_select": (coords, 8),
        "confusion_tally": (t, p, 10),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-5, atol=1e-5)


def bench_kernels(repeat=5, number=3):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  match")
    for name, args in cases(rng).items():
        fn_np, fn_nb = getattr(numpy_impl, name), getattr(numba_impl, name)
        ok = _same(fn_np(*args), fn_nb(*args))  # also pays the compile cost
        t_np = min(timeit.repeat(lambda: fn_np(*args), repeat=repeat, number=number)) / number
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), repeat=repeat, number=number)) / number
        print(f"{name:<24}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {'yes' if ok else 'NO'}")


STEP = r"""
import time
import numpy as np
from unet_gnn import harness
from unet_gnn.config import RunConfig
from unet_gnn.data_pipeline import synth_shapes
samples = synth_shapes(0, 8, 64)
cfg = RunConfig(depth=3, base_channels=8, image_size=64, epochs=1, batch_size=8)
harness.train(cfg, samples, write_checkpoints=False)  # warm-up, includes JIT
cfg = cfg.replace(epochs=3)
t0 = time.perf_counter()
harness.train(cfg, samples, write_checkpoints=False)
print((time.perf_counter() - t0) / 3)
"""


def bench_training():
    print("\nfull training step (8 images, 64x64, depth 3, base 8):")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, UGNN_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
        print(f"  {backend:<6} {float(out.stdout.strip()) * 1e3:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", action="store_true", help="also time a training step under each backend")
    args = ap.parse_args()
    if numba_impl is None:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels()
    if args.train:
        bench_training()


if __name__ == "__main__":
    main()
