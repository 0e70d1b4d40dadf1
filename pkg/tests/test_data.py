import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvae.data import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, Dataset, load_checkpoint, load_idx,
                       parse_idx, read_pnm, save_checkpoint, tile_images, write_idx, write_image_grid)
from bvae.errors import CheckpointError, ContractError, DimensionError, ParseError
from bvae.tensor import Rng


def idx_bytes(arr, magic):
    arr = np.asarray(arr, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def test_idx_header_example(tmp_path):
    imgs = (np.arange(24) * 10 % 256).reshape(2, 3, 4)
    buf = idx_bytes(imgs, IDX_IMAGES_MAGIC)
    assert buf[:4] == b"\x00\x00\x08\x03"
    p = tmp_path / "imgs"
    p.write_bytes(buf)
    ds = load_idx(str(p))
    assert ds.images.shape == (2, 1, 3, 4) and ds.images.dtype == np.float32
    assert np.array_equal(ds.images[:, 0] * 255, imgs.astype(np.float32))


def test_idx_pixel_scaling(tmp_path):
    p = tmp_path / "imgs"
    write_idx(p, np.array([[[0, 255]]]), IDX_IMAGES_MAGIC)
    ds = load_idx(str(p))
    assert ds.images[0, 0, 0, 0] == 0.0 and ds.images[0, 0, 0, 1] == 1.0


def test_idx_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2)), IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "l", np.zeros(2), IDX_LABELS_MAGIC)
    with pytest.raises(ParseError, match="offset"):
        load_idx(str(tmp_path / "i"), str(tmp_path / "l"))


def test_idx_bad_magic_and_swapped_files(tmp_path):
    with pytest.raises(ParseError) as e:
        parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")
    assert e.value.offset == 0
    write_idx(tmp_path / "l", np.zeros(2), IDX_LABELS_MAGIC)
    with pytest.raises(ParseError):
        load_idx(str(tmp_path / "l"))


def test_idx_fuzz_prefixes_and_corruptions():
    r = Rng(0)
    valid = idx_bytes((r.uniform((5, 6, 7)) * 255).astype(np.uint8), IDX_IMAGES_MAGIC)
    outcomes = {"ok": 0, "err": 0}
    for i in range(10**4):
        if i % 2 == 0:
            buf = valid[: int(r.uniform() * (len(valid) + 1))]
        else:
            buf = bytearray(valid)
            for _ in range(int(r.uniform() * 4) + 1):
                buf[int(r.uniform() * 12)] = int(r.uniform() * 256)
            buf = bytes(buf[: int(r.uniform() * (len(buf) + 1))])
        try:
            parse_idx(buf, IDX_IMAGES_MAGIC)
            outcomes["ok"] += 1
        except ParseError as e:
            assert 0 <= e.offset <= len(buf)
            outcomes["err"] += 1
    assert outcomes["err"] > 0 and outcomes["ok"] > 0


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64))
def test_idx_total_on_random_bytes(buf):
    try:
        parse_idx(buf)
    except ParseError:
        pass


def test_dataset_invariants():
    with pytest.raises(ContractError):
        Dataset(np.full((1, 1, 2, 2), 1.5))
    with pytest.raises(DimensionError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3))
    ds = Dataset(Rng(0).uniform((10, 1, 2, 2)), np.arange(10))
    sub = ds.subsample(4, Rng(1))
    assert len(sub) == 4 and np.array_equal(sub.images, ds.images[sub.labels])
    assert ds.subsample(4, Rng(1)).labels.tolist() == sub.labels.tolist()


def test_grid_all_half(tmp_path):
    p = write_image_grid(np.full((1, 1, 8, 8), 0.5), 1, str(tmp_path / "g.pgm"))
    data = open(p, "rb").read()
    assert data.startswith(b"P5\n12 12\n255\n")
    g = read_pnm(p)[..., 0]
    assert np.all(g[2:10, 2:10] == 128)
    mask = np.ones_like(g, bool)
    mask[2:10, 2:10] = False
    assert np.all(g[mask] == 0)


@pytest.mark.parametrize("c,ext", [(1, "pgm"), (3, "ppm")])
def test_grid_roundtrip_exact(tmp_path, c, ext):
    imgs = Rng(3).uniform((7, c, 5, 6), -0.2, 1.2)
    p = write_image_grid(imgs, 3, str(tmp_path / f"g.{ext}"))
    back = read_pnm(p)
    q = np.round(255 * np.clip(imgs, 0, 1)).astype(np.uint8)
    for i in range(7):
        r, col = divmod(i, 3)
        y, x = 2 + r * 7, 2 + col * 8
        assert np.array_equal(back[y : y + 5, x : x + 6], q[i].transpose(1, 2, 0))
    assert np.array_equal(back, tile_images(imgs, 3))


def test_grid_errors():
    with pytest.raises(ContractError):
        tile_images(np.zeros((1, 1, 2, 2)), 0)
    with pytest.raises(ContractError):
        tile_images(np.zeros((1, 2, 2, 2)), 1)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_idempotent(tmp_path, dtype):
    r = Rng(0)
    tensors = {"a/W": r.standard_normal((3, 4), dtype=dtype), "b": np.arange(5, dtype=np.int64),
               "c": r.standard_normal((), dtype=dtype)}
    meta = {"model": "bvae", "step": 7, "nested": {"x": [1, 2.5]}}
    p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
    save_checkpoint(p1, tensors, meta)
    t2, m2 = load_checkpoint(p1)
    assert m2 == meta
    for k in tensors:
        assert t2[k].dtype == tensors[k].dtype and t2[k].tobytes() == tensors[k].tobytes()
    save_checkpoint(p2, t2, m2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_errors(tmp_path):
    p = str(tmp_path / "m.ckpt")
    save_checkpoint(p, {"first": np.zeros(4), "second": np.ones(8)}, {})
    data = open(p, "rb").read()
    open(p, "wb").write(data[:-8])
    with pytest.raises(CheckpointError, match="'second' is missing"):
        load_checkpoint(p)
    open(p, "wb").write(data + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
    bad = bytearray(data)
    bad[8] = 9
    open(p, "wb").write(bytes(bad))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(p)
    bad = bytearray(data)
    bad[20] = ord("#")
    open(p, "wb").write(bytes(bad))
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(p)
    open(p, "wb").write(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(str(tmp_path / "x"), {"c": np.zeros(2, np.complex128)}, {})


def test_real_mnist_header(mnist):
    with open(mnist["test_images"], "rb") as f:
        head = f.read(16)
    assert struct.unpack(">4I", head) == (IDX_IMAGES_MAGIC, 10000, 28, 28)
    ds = load_idx(mnist["test_images"], mnist["test_labels"], "test")
    assert ds.images.shape == (10000, 1, 28, 28) and set(np.unique(ds.labels)) == set(range(10))
