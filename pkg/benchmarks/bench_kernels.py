"""Compiled vs numpy im2col/col2im, plus one full training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bvae import _pykernels
from bvae.tensor import conv_out_extent

try:
    from bvae import _ckernels
except ImportError:
    _ckernels = None

# (batch, channels, extent, k, stride, pad): the default MNIST trunk at batch 64
SHAPES = [(64, 1, 28, 4, 2, 1), (64, 16, 14, 4, 2, 1), (64, 16, 14, 3, 1, 1)]

STEP = """
import numpy as np
from bvae.kernels import BACKEND
from bvae.models import build_model
from bvae.objectives import ObjectiveConfig, objective_loss
from bvae.autodiff import Tape
from bvae.tensor import Rng
m = build_model("bvae", seed=0)
x = Rng(1).uniform((64, 1, 28, 28)).astype(np.float32)
rng = Rng(2)
def step():
    t = Tape()
    loss = objective_loss(m, x, ObjectiveConfig(), rng, t)
    t.backward(loss.total, m.params)
"""


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_table(repeat):
    rows = []
    for n, c, hw, k, s, p in SHAPES:
        o = conv_out_extent(hw, k, s, p)
        x = np.random.default_rng(0).random((n, c, hw, hw), dtype=np.float32)
        cols = _pykernels.im2col(x, k, s, p, o, o)
        for name, mod in (("python", _pykernels), ("cython", _ckernels)):
            if mod is None:
                continue
            t1 = bench(lambda: mod.im2col(x, k, s, p, o, o), repeat)
            t2 = bench(lambda: mod.col2im(cols, c, hw, hw, k, s, p, o, o), repeat)
            rows.append((f"{n}x{c}x{hw}x{hw} k{k} s{s} p{p}", name, t1, t2))
    return rows


def train_step_ms(backend, repeat):
    env = dict(os.environ)
    env.pop("BVAE_PURE_PYTHON", None)
    if backend == "python":
        env["BVAE_PURE_PYTHON"] = "1"
    code = STEP + f"import timeit\nstep()\nprint(BACKEND, min(timeit.repeat(step, number=1, repeat={repeat})) * 1e3)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, ms = out.stdout.split()
    return name, float(ms)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'shape':28s} {'backend':8s} {'im2col ms':>10s} {'col2im ms':>10s}")
    for shape, name, t1, t2 in kernel_table(args.repeat):
        print(f"{shape:28s} {name:8s} {t1:10.3f} {t2:10.3f}")
    print()
    for backend in ("python", "cython"):
        name, ms = train_step_ms(backend, max(3, args.repeat // 4))
        print(f"train step, batch 64, backend {name}: {ms:.1f} ms")


if __name__ == "__main__":
    main()
