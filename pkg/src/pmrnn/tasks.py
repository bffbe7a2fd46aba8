"""Synthetic sequence tasks, dataset containers, and the pixel-image loader.

Every sample is generated from its own counter-derived RNG stream, so datasets
are reproducible element-wise, splits never share streams, and the distractor
noise of the noisy copy task lives on a stream disjoint from the signal.

Tasks:
  copy_first_discrete     one-hot class at t=0, zeros after, classify at the end
  copy_first_clean        scalar U(-1,1) at t=0, zeros after, reproduce at the end
  copy_first_noisy        same but with U(-1,1) distractors at every later step
  parity                  uniform bits, label = popcount mod 2, variable lengths
  pixel_mnist             28x28 digits as 784-step pixel sequences (IDX files)
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import config_from_dict
from .numerics import REAL, Rng, SequenceBatch

# Per-split stream bases; each split owns 2^40 counters, the upper half of
# which is reserved for auxiliary draws (noise) so signal streams never move.
SPLIT_STRIDE = 1 << 40
NOISE_OFFSET = 1 << 39
SPLIT_INDEX = {"train": 0, "val": 1, "test": 2}

TASK_KINDS = ("copy_first_discrete", "copy_first_clean", "copy_first_noisy",
              "parity", "pixel_mnist")
COPY_CLASSES = 15
DATASET_MAGIC = b"PMD1"


def quantization_limit(bits: int) -> float:
    """Best possible MAE for U(-1,1) targets with 2^bits quantization levels."""
    if bits < 1:
        raise ValueError("bits must be a positive integer")
    return 1.0 / 2.0 ** (bits + 1)


def split_rng(rng: Rng, split: str) -> Rng:
    return rng.offset(SPLIT_INDEX[split] * SPLIT_STRIDE)


# ---------------------------------------------------------------------------
# Dataset containers
# ---------------------------------------------------------------------------

@dataclass
class FirstStepDataset:
    """Sequences that are zero everywhere except the first step."""

    first: np.ndarray      # [N, F]
    steps: int
    labels: np.ndarray
    n_classes: int | None

    @property
    def count(self) -> int:
        return self.first.shape[0]

    def batch(self, indices: np.ndarray):
        b = len(indices)
        data = np.zeros((b, self.steps, self.first.shape[1]), REAL)
        data[:, 0, :] = self.first[indices]
        lengths = np.full(b, self.steps, np.int64)
        return SequenceBatch(data, lengths), self.labels[indices]

    def materialize(self):
        batch, labels = self.batch(np.arange(self.count))
        return batch.data, batch.lengths, labels


@dataclass
class DenseDataset:
    """Fully materialized padded sequences."""

    data: np.ndarray       # [N, T, F]
    lengths: np.ndarray    # [N]
    labels: np.ndarray
    n_classes: int | None

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def batch(self, indices: np.ndarray):
        lengths = self.lengths[indices]
        width = int(lengths.max())
        return (SequenceBatch(self.data[indices][:, :width], lengths),
                self.labels[indices])

    def materialize(self):
        return self.data, self.lengths, self.labels


@dataclass
class VirtualParityDataset:
    """On-the-fly parity sampler; sample i is a pure function of its stream."""

    rng: Rng
    min_len: int
    max_len: int
    count: int = 1 << 31
    n_classes: int | None = 2

    def _sample(self, index: int):
        gen = self.rng.offset(int(index)).generator()
        length = int(gen.integers(self.min_len, self.max_len + 1))
        bits = gen.integers(0, 2, size=length)
        return bits, int(bits.sum() % 2)

    def batch(self, indices: np.ndarray):
        rows = [self._sample(i) for i in indices]
        lengths = np.array([len(bits) for bits, _ in rows], np.int64)
        data = np.zeros((len(rows), int(lengths.max()), 1), REAL)
        for r, (bits, _) in enumerate(rows):
            data[r, : len(bits), 0] = bits
        labels = np.array([label for _, label in rows], np.int64)
        return SequenceBatch(data, lengths), labels

    def materialize_first(self, n: int) -> DenseDataset:
        batch, labels = self.batch(np.arange(n))
        return DenseDataset(batch.data, batch.lengths, labels, self.n_classes)


@dataclass
class PixelDataset:
    """Raw uint8 pixel rows scaled to [0, 1] at batch time."""

    pixels: np.ndarray     # [N, T] uint8
    labels: np.ndarray
    n_classes: int | None = 10

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    def batch(self, indices: np.ndarray):
        data = (self.pixels[indices, :, None] / 255.0).astype(REAL)
        lengths = np.full(len(indices), self.pixels.shape[1], np.int64)
        return SequenceBatch(data, lengths), self.labels[indices]

    def materialize(self):
        batch, labels = self.batch(np.arange(self.count))
        return batch.data, batch.lengths, labels


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def gen_copy_first_discrete(count: int, steps: int, rng: Rng) -> FirstStepDataset:
    labels = np.empty(count, np.int64)
    first = np.zeros((count, COPY_CLASSES), REAL)
    for i in range(count):
        labels[i] = rng.offset(i).generator().integers(COPY_CLASSES)
        first[i, labels[i]] = 1.0
    return FirstStepDataset(first, steps, labels, COPY_CLASSES)


def gen_copy_first_continuous(count: int, steps: int, rng: Rng, noisy: bool):
    values = np.empty(count, REAL)
    for i in range(count):
        values[i] = rng.offset(i).generator().uniform(-1.0, 1.0)
    labels = values.copy()
    if not noisy:
        return FirstStepDataset(values[:, None], steps, labels, None)
    data = np.empty((count, steps, 1), REAL)
    data[:, 0, 0] = values
    for i in range(count):
        noise_gen = rng.offset(NOISE_OFFSET + i).generator()
        data[i, 1:, 0] = noise_gen.uniform(-1.0, 1.0, size=steps - 1)
    lengths = np.full(count, steps, np.int64)
    return DenseDataset(data, lengths, labels, None)


def load_idx(path) -> np.ndarray:
    """Read one IDX-format array (optionally gzipped), any rank."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        zero, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise ValueError(f"{path} is not an unsigned-byte IDX file")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path} is truncated")
    return data.reshape(dims)


# ---------------------------------------------------------------------------
# Task assembly
# ---------------------------------------------------------------------------

@dataclass
class TaskConfig:
    kind: str
    length: int | None = None
    train_count: int = 10000
    val_count: int = 2000
    test_count: int = 2000
    train_length_range: tuple = (50, 400)
    eval_length_range: tuple = (50, 1000)
    data_dir: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        if self.kind.startswith("copy_first"):
            if self.length is None or self.length < 1:
                raise ValueError(f"{self.kind} needs a positive length")
        if self.kind == "pixel_mnist" and self.data_dir is None:
            raise ValueError("pixel_mnist needs data_dir with IDX files")
        self.train_length_range = tuple(self.train_length_range)
        self.eval_length_range = tuple(self.eval_length_range)

    @property
    def classification(self) -> bool:
        return self.kind in ("copy_first_discrete", "parity", "pixel_mnist")

    @property
    def input_dim(self) -> int:
        return COPY_CLASSES if self.kind == "copy_first_discrete" else 1

    @property
    def output_dim(self) -> int:
        return {"copy_first_discrete": COPY_CLASSES, "parity": 2,
                "pixel_mnist": 10}.get(self.kind, 1)

    def to_dict(self) -> dict:
        out = dict(kind=self.kind, length=self.length,
                   train_count=self.train_count, val_count=self.val_count,
                   test_count=self.test_count,
                   train_length_range=list(self.train_length_range),
                   eval_length_range=list(self.eval_length_range))
        if self.data_dir is not None:
            out["data_dir"] = self.data_dir
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TaskConfig":
        return config_from_dict(cls, data)


def build_task(config: TaskConfig, seed: int) -> dict:
    """Materialize {train, val, test} datasets on disjoint streams."""
    base = Rng(seed)
    c = config
    if c.kind == "copy_first_discrete":
        return {s: gen_copy_first_discrete(n, c.length, split_rng(base, s))
                for s, n in zip(("train", "val", "test"),
                                (c.train_count, c.val_count, c.test_count))}
    if c.kind in ("copy_first_clean", "copy_first_noisy"):
        noisy = c.kind == "copy_first_noisy"
        return {s: gen_copy_first_continuous(n, c.length, split_rng(base, s), noisy)
                for s, n in zip(("train", "val", "test"),
                                (c.train_count, c.val_count, c.test_count))}
    if c.kind == "parity":
        lo, hi = c.train_length_range
        train = VirtualParityDataset(split_rng(base, "train"), lo, hi)
        val = VirtualParityDataset(split_rng(base, "val"), lo, hi
                                   ).materialize_first(c.val_count)
        elo, ehi = c.eval_length_range
        test = VirtualParityDataset(split_rng(base, "test"), elo, ehi
                                    ).materialize_first(c.test_count)
        return {"train": train, "val": val, "test": test}
    return _build_pixel_mnist(c)


def _build_pixel_mnist(c: TaskConfig) -> dict:
    from pathlib import Path
    root = Path(c.data_dir)

    def find(stem: str) -> Path:
        for suffix in ("", ".gz"):
            p = root / f"{stem}{suffix}"
            if p.exists():
                return p
        raise FileNotFoundError(f"missing {stem}[.gz] under {root}")

    train_images = load_idx(find("train-images-idx3-ubyte"))
    train_labels = load_idx(find("train-labels-idx1-ubyte")).astype(np.int64)
    test_images = load_idx(find("t10k-images-idx3-ubyte"))
    test_labels = load_idx(find("t10k-labels-idx1-ubyte")).astype(np.int64)
    flat = train_images.reshape(train_images.shape[0], -1)
    # Tail of the training set becomes validation (10k at full size).
    held = min(10000, max(1, flat.shape[0] // 6))
    return {
        "train": PixelDataset(flat[:-held], train_labels[:-held]),
        "val": PixelDataset(flat[-held:], train_labels[-held:]),
        "test": PixelDataset(test_images.reshape(test_images.shape[0], -1),
                             test_labels),
    }


# ---------------------------------------------------------------------------
# On-disk dataset container
# ---------------------------------------------------------------------------

def write_dataset(path, dataset, meta: dict | None = None) -> None:
    """Dense self-describing dump: header JSON + little-endian blobs."""
    data, lengths, labels = dataset.materialize()
    header = json.dumps({
        "format_version": 1,
        "shape": list(data.shape),
        "labels_dtype": str(labels.dtype),
        "n_classes": dataset.n_classes,
        "meta": meta or {},
    }).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.astype("<f8").tobytes())
        fh.write(lengths.astype("<i8").tobytes())
        fh.write(labels.astype("<f8" if labels.dtype.kind == "f" else "<i8").tobytes())


def read_dataset(path):
    """Returns (DenseDataset, meta)."""
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path} is not a dataset file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        n, t, f = header["shape"]
        data = np.frombuffer(fh.read(8 * n * t * f), "<f8").reshape(n, t, f).astype(REAL)
        lengths = np.frombuffer(fh.read(8 * n), "<i8").astype(np.int64)
        kind = "<f8" if np.dtype(header["labels_dtype"]).kind == "f" else "<i8"
        labels = np.frombuffer(fh.read(8 * n), kind)
        labels = labels.astype(np.dtype(header["labels_dtype"]))
    return DenseDataset(data, lengths, labels, header["n_classes"]), header["meta"]
