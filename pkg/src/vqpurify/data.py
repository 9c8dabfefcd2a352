"""Image sets, the CIFAR-10 binary reader and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"PVQG"  u32 version  u32 entry_count
    per entry, sorted by name:
        u16 name_len  name (utf-8)
        u8  ndim      u32 * ndim shape
        u64 nbytes    u32 crc32(data)
        data          float32 little-endian, row-major
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthetic
from .errors import DataError, FormatError

MAGIC = b"PVQG"
VERSION = 1
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledImageSet:
    images: np.ndarray                     # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray                     # (N,) int64
    poison_flags: np.ndarray = field(default=None)  # (N,) bool
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poison_flags is None:
            self.poison_flags = np.zeros(len(self.labels), dtype=bool)
        self.poison_flags = np.asarray(self.poison_flags, dtype=bool)
        n = len(self.labels)
        if self.images.ndim != 4 or len(self.images) != n or len(self.poison_flags) != n:
            raise DataError(f"inconsistent set: images {self.images.shape}, labels {n}, "
                            f"flags {len(self.poison_flags)}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.poison_flags[idx], self.n_classes)

    def with_images(self, images: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(images, self.labels.copy(), self.poison_flags.copy(), self.n_classes)


def gen_synthetic(n_per_class: int, n_classes: int = 10, seed: int = 0) -> LabeledImageSet:
    images, labels = synthetic.generate(n_per_class, n_classes, seed)
    return LabeledImageSet(images, labels, n_classes=n_classes)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> LabeledImageSet:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return LabeledImageSet(images, labels, n_classes=10)


def read_cifar10_binary(path, split: str = "train") -> LabeledImageSet:
    """Read a CIFAR-10 binary batch file, or the standard batch files of a directory."""
    path = Path(path)
    if path.is_file():
        return parse_cifar10_bytes(path.read_bytes(), str(path))
    if split not in CIFAR_FILES:
        raise DataError(f"unknown split {split!r}")
    parts = [parse_cifar10_bytes((path / name).read_bytes(), name) for name in CIFAR_FILES[split]]
    return LabeledImageSet(np.concatenate([p.images for p in parts]),
                           np.concatenate([p.labels for p in parts]), n_classes=10)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        data = arr.tobytes()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<QI", len(data), zlib.crc32(data)))
        chunks.append(data)
    return b"".join(chunks)


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(tensors))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def parse_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, f"entry {i} name length"))
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i}: name is not utf-8") from exc
        (ndim,) = struct.unpack("<B", r.take(1, f"entry {name!r} ndim"))
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"entry {name!r} shape"))
        nbytes, crc = struct.unpack("<QI", r.take(12, f"entry {name!r} size"))
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise FormatError(f"entry {name!r}: shape {shape} needs {expected} bytes, header says {nbytes}")
        data = r.take(nbytes, f"entry {name!r} data")
        if zlib.crc32(data) != crc:
            raise FormatError(f"entry {name!r}: checksum mismatch")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last entry")
    return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# image sets on disk: images in a checkpoint, labels as an int32 sidecar
# ---------------------------------------------------------------------------

def save_image_set(ds: LabeledImageSet, path) -> None:
    path = Path(path)
    save_checkpoint({"images": ds.images, "poison_flags": ds.poison_flags.astype(np.float32)}, path)
    path.with_suffix(".labels").write_bytes(
        struct.pack("<I", ds.n_classes) + ds.labels.astype("<i4").tobytes())


def load_image_set(path) -> LabeledImageSet:
    path = Path(path)
    tensors = load_checkpoint(path)
    if "images" not in tensors:
        raise FormatError(f"{path}: no 'images' entry")
    images = tensors["images"]
    lab_path = path.with_suffix(".labels")
    if lab_path.exists():
        raw = lab_path.read_bytes()
        if len(raw) < 4 or (len(raw) - 4) % 4:
            raise FormatError(f"{lab_path}: malformed label sidecar")
        (n_classes,) = struct.unpack("<I", raw[:4])
        labels = np.frombuffer(raw[4:], dtype="<i4").astype(np.int64)
    else:
        n_classes, labels = 10, np.zeros(len(images), dtype=np.int64)
    flags = tensors.get("poison_flags", np.zeros(len(images), dtype=np.float32)) > 0.5
    if len(labels) != len(images):
        raise FormatError(f"{lab_path}: {len(labels)} labels for {len(images)} images")
    return LabeledImageSet(images, labels, flags, n_classes)
