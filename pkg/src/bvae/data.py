"""Dataset ingestion (IDX), image-grid export (binary PGM/PPM) and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"BVAECKPT"            8-byte magic
    u32 version            currently 1
    u64 manifest_length
    manifest               UTF-8 JSON, keys sorted
    payload                tensors back to back, little-endian

The manifest holds the model kind and architecture, training state, and a
``tensors`` list of ``{name, shape, dtype, offset, nbytes}`` records with
offsets relative to the payload start.
"""
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images ``[N, C, H, W]`` in [0, 1] with optional aligned labels."""

    images: np.ndarray
    labels: np.ndarray = None
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DimensionError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return self.images.shape[0]

    def subsample(self, n, rng):
        """Deterministic subset of ``n`` items drawn with ``rng`` (order kept sorted)."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(rng.choice(len(self), n))
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split)

    def astype(self, dtype):
        return Dataset(self.images.astype(dtype), self.labels, self.split)


def parse_idx(buf, expect_magic=None):
    """Parse an IDX byte string of unsigned bytes; returns a uint8 array."""
    buf = memoryview(bytes(buf))
    if len(buf) < 4:
        raise ParseError("truncated IDX header", len(buf))
    zero, dtype_code, ndim = buf[0] << 8 | buf[1], buf[2], buf[3]
    magic = struct.unpack(">I", buf[:4])[0]
    if zero != 0 or dtype_code != 0x08:
        raise ParseError(f"bad IDX magic 0x{magic:08x}", 0)
    if expect_magic is not None and magic != expect_magic:
        raise ParseError(f"IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    if ndim == 0:
        raise ParseError("IDX file declares zero dimensions", 3)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise ParseError("truncated IDX dimension list", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = math.prod(dims)
    if len(buf) < head + count:
        raise ParseError(f"IDX payload truncated: need {count} bytes after header", len(buf))
    if len(buf) > head + count:
        raise ParseError("trailing bytes after IDX payload", head + count)
    return np.frombuffer(buf[head:], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, split="train"):
    """Read MNIST-family IDX files; pixels are scaled by 1/255."""
    with open(images_path, "rb") as f:
        raw = parse_idx(f.read(), IDX_IMAGES_MAGIC)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise ParseError(f"image file has {raw.ndim} dimensions, expected 3", 3)
    images = raw.astype(np.float32) / np.float32(255.0)
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as f:
            labels = parse_idx(f.read(), IDX_LABELS_MAGIC)
        if labels.ndim != 1:
            raise ParseError("label file must be one-dimensional", 3)
        if labels.shape[0] != images.shape[0]:
            raise ParseError(f"{labels.shape[0]} labels for {images.shape[0]} images", 4)
        labels = labels.astype(np.int64)
    return Dataset(images, labels, split)


def write_idx(path, array, magic):
    """Write a uint8 array as IDX (used for fixtures and subsets)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# -- image grids ------------------------------------------------------------

GUTTER = 2


def tile_images(images, cols):
    """Arrange ``[N, C, H, W]`` images row-major with 2-pixel black gutters.

    Returns uint8 ``[rows*H + gutters, cols*W + gutters, C]``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    if cols < 1:
        raise ContractError(f"cols must be >= 1, got {cols}")
    n, c, h, w = images.shape
    if c not in (1, 3):
        raise ContractError(f"unsupported channel count {c}")
    rows = max(1, -(-n // cols))
    q = np.round(255 * np.clip(images, 0, 1)).astype(np.uint8)
    H = rows * h + (rows + 1) * GUTTER
    W = cols * w + (cols + 1) * GUTTER
    grid = np.zeros((H, W, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        y = GUTTER + r * (h + GUTTER)
        x = GUTTER + col * (w + GUTTER)
        grid[y : y + h, x : x + w] = q[i].transpose(1, 2, 0)
    return grid


def write_image_grid(images, cols, path):
    """Write images as one binary PGM (1 channel) or PPM (3 channels)."""
    grid = tile_images(images, cols)
    h, w, c = grid.shape
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(grid.tobytes())
    return path


def read_pnm(path):
    """Read a binary PGM/PPM with maxval 255; returns uint8 ``[H, W, C]``."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PNM header", pos)
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ParseError(f"unsupported PNM variant {magic!r} maxval {maxval}", 0)
    c = 1 if magic == b"P5" else 3
    body = data[pos : pos + w * h * c]
    if len(body) != w * h * c:
        raise ParseError("truncated PNM payload", len(data))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"BVAECKPT"
CKPT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


def _encode_manifest(manifest):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors, meta):
    """Write named arrays plus a JSON-serializable ``meta`` dict.

    ``tensors`` maps names to arrays (iteration order is preserved).
    """
    records = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {key}")
        b = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": key,
                        "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    manifest = _encode_manifest({"version": CKPT_VERSION, "meta": meta, "tensors": records})
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(manifest)))
        f.write(manifest)
        for b in chunks:
            f.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(tensors, meta)``."""
    with open(path, "rb") as f:
        data = f.read()
    head = len(CKPT_MAGIC) + 12
    if len(data) < head or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", data[len(CKPT_MAGIC) : head])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    if len(data) < head + mlen:
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[head : head + mlen].decode("utf-8"))
        records = manifest["tensors"]
        meta = manifest["meta"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    payload = memoryview(data)[head + mlen :]
    tensors = {}
    end_prev = 0
    for rec in records:
        try:
            name, shape, dtype = rec["name"], tuple(rec["shape"]), rec["dtype"]
            off, nbytes = int(rec["offset"]), int(rec["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: corrupt manifest record {rec!r}") from None
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        dt = np.dtype(_DTYPES[dtype])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize or off < end_prev:
            raise CheckpointError(f"{path}: manifest entry for {name!r} is inconsistent")
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated, tensor {name!r} is missing")
        arr = np.frombuffer(payload[off : off + nbytes], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.dtype(dtype))
        end_prev = off + nbytes
    if end_prev != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end_prev} unexpected trailing payload bytes")
    return tensors, meta
