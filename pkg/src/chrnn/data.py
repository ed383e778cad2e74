"""Datasets (IDX files, synthetic left-of task) and checkpoint persistence.

Class labels are 0-based throughout.
"""
from __future__ import annotations

import gzip
import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import config as cfg

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class IdxFormatError(DataError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32, normalized
    labels: np.ndarray          # (N,) int64 in [0, n_classes)
    n_classes: int
    split: str = "train"
    mean: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)


# --------------------------------------------------------------------- IDX

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(buf: bytes, expect_magic: int | None = None, what: str = "idx") -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"{what}: truncated header ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_DTYPES:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x}")
    ndim = buf[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxFormatError(f"{what}: truncated dimension block")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    dt = np.dtype(_IDX_DTYPES[buf[2]])
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - head != need:
        raise IdxFormatError(f"{what}: payload is {len(buf) - head} bytes, header promises {need}")
    return np.frombuffer(buf, dtype=dt, offset=head).reshape(dims)


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    raw = p.read_bytes()
    if p.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, mean: np.ndarray | None = None, split: str = "train",
             n_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair, scale to [0, 1] and subtract the pixel mean.

    ``mean`` is the per-pixel training mean; when None it is computed from
    these images (use that for the training split and pass it to the others).
    """
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, f"{images_path}")
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, f"{labels_path}")
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1 dimension, got {labels.ndim}")
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    if mean is None:
        mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1:], np.float32)
    x = x - mean.astype(np.float32)
    lab = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(lab.max()) + 1 if len(lab) else 1
    return Dataset(x, lab, n_classes, split, mean.astype(np.float32))


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (used for fixtures and exports)."""
    a = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


# ------------------------------------------------------ synthetic context

_PLUS = np.array([[0, 1, 1, 0],
                  [1, 1, 1, 1],
                  [1, 1, 1, 1],
                  [0, 1, 1, 0]], dtype=np.float32)
_CROSS = np.array([[1, 0, 0, 1],
                   [0, 1, 1, 0],
                   [0, 1, 1, 0],
                   [1, 0, 0, 1]], dtype=np.float32)


def _normalize(p):
    return (p - p.mean()) / p.std()


GLYPH_A = _normalize(_PLUS)
GLYPH_B = _normalize(_CROSS)
LAYOUT = 6
CELL = 4
LEFT, NOT_LEFT = 0, 1


def gen_context_task(n: int, seed: int, split: str = "train") -> Dataset:
    """Left-of task: glyph A and glyph B placed in two cells of a 6x6 layout.

    Label 0 when A sits in a column strictly left of B, else 1. Labels are
    drawn first (balanced in expectation) and the two columns are always
    distinct, so mirroring an image flips its label. Both classes use the
    same two glyphs with the same per-glyph statistics; only their relative
    position differs.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, LAYOUT * CELL, LAYOUT * CELL), dtype=np.float32)
    labels = rng.integers(0, 2, size=n)
    for k in range(n):
        cols = np.sort(rng.choice(LAYOUT, size=2, replace=False))
        rows = rng.integers(0, LAYOUT, size=2)
        a, b = (0, 1) if labels[k] == LEFT else (1, 0)
        _stamp(images[k, 0], rows[a], cols[a], GLYPH_A)
        _stamp(images[k, 0], rows[b], cols[b], GLYPH_B)
    return Dataset(images, labels.astype(np.int64), 2, split)


def _stamp(img, r, c, glyph):
    img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = glyph


def locate_glyphs(image: np.ndarray) -> tuple[tuple[int, int], tuple[int, int]]:
    """(row, col) layout cells of glyph A and glyph B by exact template match."""
    img = image.reshape(LAYOUT * CELL, LAYOUT * CELL)
    found = {}
    for r in range(LAYOUT):
        for c in range(LAYOUT):
            patch = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            for name, g in (("A", GLYPH_A), ("B", GLYPH_B)):
                if np.array_equal(patch, g):
                    found[name] = (r, c)
    if set(found) != {"A", "B"}:
        raise DataError("image does not contain exactly one of each glyph")
    return found["A"], found["B"]


def split_dataset(ds: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    return (Dataset(ds.images[:n_first], ds.labels[:n_first], ds.n_classes, ds.split, ds.mean),
            Dataset(ds.images[n_first:], ds.labels[n_first:], ds.n_classes, ds.split, ds.mean))


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CHRNNCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    run: "cfg.RunConfig"
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    meta: dict[str, str]
    mean: np.ndarray | None = None


def _put_text(out: io.BytesIO, text: str) -> None:
    b = text.encode("utf-8")
    out.write(struct.pack("<Q", len(b)))
    out.write(b)


def _put_tensor(out: io.BytesIO, name: str, a: np.ndarray) -> None:
    if a.dtype != np.float32:
        raise CheckpointError(f"checkpoint tensors are float32; {name} is {a.dtype}")
    nb = name.encode("utf-8")
    out.write(struct.pack("<I", len(nb)))
    out.write(nb)
    out.write(struct.pack("<I", a.ndim))
    out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    out.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def encode_checkpoint(ck: Checkpoint) -> bytes:
    """Layout: magic, u32 version, payload, u32 CRC32(payload).

    Payload: config text, meta text (``key = value`` lines), u32 tensor
    count, then per tensor: u32 name length, UTF-8 name, u32 rank, rank x
    u64 extents, raw little-endian float32 values. Text blocks carry a u64
    byte length. All integers little-endian.
    """
    body = io.BytesIO()
    _put_text(body, cfg.dump(ck.run))
    _put_text(body, "".join(f"{k} = {v}\n" for k, v in sorted(ck.meta.items())))
    tensors = [(f"param.{k}", v) for k, v in sorted(ck.params.items())]
    tensors += [(f"velocity.{k}", v) for k, v in sorted(ck.velocity.items())]
    if ck.mean is not None:
        tensors.append(("data.mean", np.asarray(ck.mean, dtype=np.float32)))
    body.write(struct.pack("<I", len(tensors)))
    for name, a in tensors:
        _put_tensor(body, name, a)
    payload = body.getvalue()
    return CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint payload")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(CKPT_MAGIC) + 8 or not buf.startswith(CKPT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf[8:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} not supported (expected {CKPT_VERSION})")
    payload, (crc,) = buf[12:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    rd = _Reader(payload)
    run = cfg.loads(rd.take(rd.unpack("<Q")[0]).decode("utf-8"))
    meta_text = rd.take(rd.unpack("<Q")[0]).decode("utf-8")
    meta = {}
    for line in meta_text.splitlines():
        k, v = line.split(" = ", 1)
        meta[k] = v
    (count,) = rd.unpack("<I")
    params, velocity, mean = {}, {}, None
    for _ in range(count):
        name = rd.take(rd.unpack("<I")[0]).decode("utf-8")
        (rank,) = rd.unpack("<I")
        shape = rd.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(rd.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        kind, _, key = name.partition(".")
        if kind == "param":
            params[key] = a
        elif kind == "velocity":
            velocity[key] = a
        elif name == "data.mean":
            mean = a
        else:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
    if rd.pos != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return Checkpoint(run, params, velocity, meta, mean)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"no such checkpoint: {p}")
    return decode_checkpoint(p.read_bytes())


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bitwise equality of two parameter dicts."""
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)
