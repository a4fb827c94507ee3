"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (JIT compile) and then ``repeat`` times; the
best wall time is reported. A final section times one tiny-model training
step under each backend in a fresh interpreter, since the backend is fixed
at import.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from chexfusion import kernels
from chexfusion._accel import HAVE_NUMBA

STEP_SCRIPT = """
import time, numpy as np
from chexfusion import kernels, nn
from chexfusion.head import build_model
from chexfusion.synthetic import pattern_dataset
ds = pattern_dataset(16)
model = build_model("tiny", hidden1=64)
def step():
    model.zero_grad()
    logits = model.forward(ds.images, ds.meta, training=True)
    model.backward(nn.sigmoid_backward(nn.bce_loss_backward(nn.sigmoid(logits), ds.labels), logits))
step()
best = min((lambda t: (step(), time.perf_counter() - t)[1])(time.perf_counter()) for _ in range({repeat}))
print(kernels.BACKEND, best)
"""


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32, 34, 34)).astype(np.float32)  # 3x3 conv input, padded
    cols_shape = (32 * 9, 16 * 32 * 32)
    dcols = rng.standard_normal(cols_shape).astype(np.float32)
    pool_in = rng.standard_normal((16, 64, 112, 112)).astype(np.float32)
    pooled, arg = kernels.NUMPY_KERNELS["maxpool_forward"](pool_in, 3, 3, 2, 55, 55)
    dpool = rng.standard_normal(pooled.shape).astype(np.float32)
    scores = rng.integers(0, 1000, 200_000).astype(np.float64)
    return {
        "im2col 3x3": lambda k: k["im2col"](x, 3, 3, 1, 32, 32),
        "col2im 3x3": lambda k: k["col2im"](dcols, 16, 32, 34, 34, 3, 3, 1, 32, 32),
        "maxpool fwd 3x3/2": lambda k: k["maxpool_forward"](pool_in, 3, 3, 2, 55, 55),
        "maxpool bwd 3x3/2": lambda k: k["maxpool_backward"](dpool, arg, 112, 112, 3, 3, 2),
        "avgpool fwd 2x2/2": lambda k: kernels.avgpool_forward(pool_in, 2, 2, 2, 56, 56, k),
        "avgpool bwd 2x2/2": lambda k: kernels.avgpool_backward(dpool[:, :, :56, :55], 112, 110, 2, 2, 2, k),
        "average_ranks 200k": lambda k: k["average_ranks"](scores),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, run in cases().items():
        t_np = best_time(lambda: run(kernels.NUMPY_KERNELS), args.repeat)
        t_nb = best_time(lambda: run(kernels.NUMBA_KERNELS), args.repeat)
        print(f"{name:<20} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}")

    print("\ntiny model, one forward+backward step at batch 16")
    for flag in ("1", "0"):
        env = dict(os.environ, CHEXFUSION_DISABLE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(repeat=args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        ).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
