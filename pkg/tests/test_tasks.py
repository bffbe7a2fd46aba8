"""Task generators, stream discipline, and the dataset/IDX file formats."""

from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

import pmrnn.tasks as tasks
from pmrnn.numerics import Rng
from pmrnn.tasks import (TaskConfig, build_task, gen_copy_first_continuous,
                         gen_copy_first_discrete, load_idx, quantization_limit,
                         read_dataset, split_rng, write_dataset)


def test_quantization_limit_values():
    assert quantization_limit(4) == 0.03125
    assert quantization_limit(1) == 0.25
    for bad in (0, -3):
        with pytest.raises(ValueError):
            quantization_limit(bad)


def test_quantization_limit_matches_midpoint_quantizer_monte_carlo():
    # An optimal b-bit code for U(-1,1) uses 2^b equal bins with midpoint
    # reconstruction; its MAE is width/4 = quantization_limit(b).
    gen = Rng(seed=70).generator()
    x = gen.uniform(-1.0, 1.0, size=1_000_000)
    for bits in (1, 2, 4):
        width = 2.0 / 2 ** bits
        recon = np.floor((x + 1.0) / width) * width - 1.0 + width / 2
        mae = np.abs(x - recon).mean()
        assert abs(mae - quantization_limit(bits)) < 1e-3


def test_discrete_copy_generation():
    ds = gen_copy_first_discrete(300, steps=10, rng=Rng(seed=71))
    again = gen_copy_first_discrete(300, steps=10, rng=Rng(seed=71))
    assert np.array_equal(ds.labels, again.labels)
    assert ds.n_classes == 15
    batch, labels = ds.batch(np.arange(8))
    assert batch.data.shape == (8, 10, 15)
    assert np.array_equal(batch.data[:, 0].argmax(-1), labels)
    assert np.all(batch.data[:, 1:] == 0.0)
    assert np.array_equal(batch.data.sum((1, 2)), np.ones(8))
    # All 15 classes show up and no class dominates.
    counts = np.bincount(ds.labels, minlength=15)
    assert counts.min() > 0 and counts.max() < 3 * 300 / 15


def test_splits_use_disjoint_streams():
    cfg = TaskConfig(kind="copy_first_discrete", length=5,
                     train_count=200, val_count=200, test_count=200)
    splits = build_task(cfg, seed=7)
    assert not np.array_equal(splits["train"].labels, splits["val"].labels)
    assert not np.array_equal(splits["val"].labels, splits["test"].labels)


def test_clean_continuous_copy():
    ds = gen_copy_first_continuous(50, steps=8, rng=Rng(seed=72), noisy=False)
    batch, labels = ds.batch(np.arange(50))
    assert np.array_equal(batch.data[:, 0, 0], labels)
    assert np.all(batch.data[:, 1:] == 0.0)
    assert np.all((labels > -1.0) & (labels < 1.0))


def test_noisy_continuous_copy_and_noise_stream_independence(monkeypatch):
    ds = gen_copy_first_continuous(50, steps=8, rng=Rng(seed=73), noisy=True)
    assert np.array_equal(ds.data[:, 0, 0], ds.labels)
    noise = ds.data[:, 1:, 0]
    assert np.all((noise > -1.0) & (noise < 1.0))
    assert np.abs(noise).max() > 0.0
    # Regenerating with a different noise sub-stream must keep targets fixed.
    monkeypatch.setattr(tasks, "NOISE_OFFSET", tasks.NOISE_OFFSET + 12345)
    moved = gen_copy_first_continuous(50, steps=8, rng=Rng(seed=73), noisy=True)
    assert np.array_equal(moved.labels, ds.labels)
    assert not np.array_equal(moved.data[:, 1:], ds.data[:, 1:])


def test_parity_task_properties():
    cfg = TaskConfig(kind="parity", val_count=64, test_count=128)
    splits = build_task(cfg, seed=9)
    train = splits["train"]
    batch, labels = train.batch(np.arange(32))
    assert batch.data.shape[-1] == 1
    mask = batch.valid_mask()
    bits = batch.data[..., 0]
    assert set(np.unique(bits)) <= {0.0, 1.0}
    popcount = (bits * mask).sum(1).astype(np.int64)
    assert np.array_equal(popcount % 2, labels)
    assert batch.lengths.min() >= 50 and batch.lengths.max() <= 400
    assert batch.data.shape[1] == batch.lengths.max()
    # Deterministic per index.
    again, again_labels = train.batch(np.arange(32))
    assert np.array_equal(batch.data, again.data)
    assert np.array_equal(labels, again_labels)
    # Held-out lengths stretch beyond the training range.
    assert splits["test"].lengths.max() > 400
    assert splits["test"].lengths.max() <= 1000
    assert splits["val"].count == 64


def test_dataset_round_trip(tmp_path):
    ds = gen_copy_first_continuous(20, steps=6, rng=Rng(seed=74), noisy=True)
    path = tmp_path / "data.bin"
    write_dataset(path, ds, meta={"kind": "copy_first_noisy", "steps": 6})
    loaded, meta = read_dataset(path)
    assert meta["steps"] == 6
    assert loaded.n_classes is None
    assert np.array_equal(loaded.data, ds.data)
    assert np.array_equal(loaded.labels, ds.labels)
    assert loaded.labels.dtype == ds.labels.dtype

    disc = gen_copy_first_discrete(20, steps=6, rng=Rng(seed=75))
    path2 = tmp_path / "disc.bin"
    write_dataset(path2, disc)
    loaded2, _ = read_dataset(path2)
    assert loaded2.labels.dtype == np.int64
    data, _, labels = disc.materialize()
    assert np.array_equal(loaded2.data, data)

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope1234")
    with pytest.raises(ValueError, match="not a dataset"):
        read_dataset(bad)


def _write_idx(path, array: np.ndarray, gz: bool = False) -> None:
    header = struct.pack(">HBB", 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    blob = header + array.astype(np.uint8).tobytes()
    if gz:
        path.write_bytes(gzip.compress(blob))
    else:
        path.write_bytes(blob)


def test_idx_loader(tmp_path):
    images = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    plain = tmp_path / "imgs"
    _write_idx(plain, images)
    assert np.array_equal(load_idx(plain), images)
    zipped = tmp_path / "imgs.gz"
    _write_idx(zipped, images, gz=True)
    assert np.array_equal(load_idx(zipped), images)

    bad = tmp_path / "bad"
    bad.write_bytes(b"\x12\x34\x56\x78" + b"\x00" * 8)
    with pytest.raises(ValueError, match="IDX"):
        load_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">HBB", 0, 0x08, 1) + struct.pack(">I", 10) + b"\x01")
    with pytest.raises(ValueError, match="truncated"):
        load_idx(short)


def test_pixel_mnist_task(tmp_path):
    n_train, n_test = 12, 4
    rng = np.random.default_rng(0)
    _write_idx(tmp_path / "train-images-idx3-ubyte",
               rng.integers(0, 256, size=(n_train, 5, 5)).astype(np.uint8))
    _write_idx(tmp_path / "train-labels-idx1-ubyte",
               rng.integers(0, 10, size=n_train).astype(np.uint8))
    _write_idx(tmp_path / "t10k-images-idx3-ubyte.gz",
               rng.integers(0, 256, size=(n_test, 5, 5)).astype(np.uint8), gz=True)
    _write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz",
               rng.integers(0, 10, size=n_test).astype(np.uint8), gz=True)
    cfg = TaskConfig(kind="pixel_mnist", data_dir=str(tmp_path))
    splits = build_task(cfg, seed=0)
    assert splits["train"].count + splits["val"].count == n_train
    assert splits["test"].count == n_test
    batch, labels = splits["test"].batch(np.arange(2))
    assert batch.data.shape == (2, 25, 1)
    assert batch.data.max() <= 1.0 and batch.data.min() >= 0.0
    assert labels.dtype == np.int64


def test_task_config_validation_and_dims():
    with pytest.raises(ValueError, match="unknown TaskConfig keys: junk"):
        TaskConfig.from_dict(dict(kind="parity", junk=1))
    with pytest.raises(ValueError, match="length"):
        TaskConfig(kind="copy_first_discrete")
    with pytest.raises(ValueError, match="data_dir"):
        TaskConfig(kind="pixel_mnist")
    cfg = TaskConfig(kind="copy_first_discrete", length=100)
    assert (cfg.input_dim, cfg.output_dim, cfg.classification) == (15, 15, True)
    cfg = TaskConfig(kind="copy_first_noisy", length=100)
    assert (cfg.input_dim, cfg.output_dim, cfg.classification) == (1, 1, False)
    cfg = TaskConfig(kind="parity")
    assert (cfg.input_dim, cfg.output_dim, cfg.classification) == (1, 2, True)
    round_tripped = TaskConfig.from_dict(cfg.to_dict())
    assert round_tripped == cfg


def test_split_rng_layout():
    base = Rng(seed=5)
    assert split_rng(base, "train").counter == 0
    assert split_rng(base, "val").counter == 1 << 40
    assert split_rng(base, "test").counter == 2 << 40
