import os

import numpy as np
import pytest

from bvae.models import Architecture, build_model
from bvae.tensor import Rng

MNIST_DIR = os.environ.get("BVAE_MNIST_DIR", "/root/data/mnist")
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths():
    paths = {k: os.path.join(MNIST_DIR, v) for k, v in MNIST_FILES.items()}
    if not all(os.path.exists(p) for p in paths.values()):
        return None
    return paths


@pytest.fixture
def mnist():
    paths = mnist_paths()
    if paths is None:
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR}")
    return paths


TINY_LAYERS = "conv:2:4:2:1,dense:6"


def tiny_model(kind="bvae", seed=0, layers=TINY_LAYERS, latent=3, shape=(1, 8, 8), precision="double"):
    return build_model(kind, Architecture(shape, layers, latent), seed=seed, precision=precision)


def tiny_batch(B=4, shape=(1, 8, 8), seed=1):
    return Rng(seed).uniform((B,) + tuple(shape))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(num, title, ok, detail=""):
    ACCEPTANCE[num] = (title, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
