import struct

import numpy as np
import pytest

from ltreweight.data import (
    DataFormatError,
    LabeledDataset,
    compute_imbalance_factor,
    export,
    gaussian_class_means,
    holdout_dev,
    ingest,
    literal_retained_counts,
    make_long_tailed,
    retained_counts,
    synth_benchmark_splits,
    synth_gaussian_longtail,
)
from ltreweight.models import ModelSpec
from ltreweight.trainer import TrainConfig, train


def balanced(k=4, per=30, d=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), per)
    return LabeledDataset(rng.normal(size=(k * per, d)), labels, k)


# ---------------------------------------------------------------- long-tail profile


def test_cifar10_lt_profile_at_if_200():
    r = retained_counts(10, 5000, 200)
    assert r[0] == 5000 and r[-1] == 25
    assert 11190 <= r.sum() <= 11215


def test_cifar100_lt_profile_at_if_200():
    r = retained_counts(100, 500, 200)
    assert r[0] == 500 and r[-1] in (2, 3)
    assert abs(r.sum() - 9502) <= 0.01 * 9502


def test_literal_reading_misses_the_reported_totals():
    # every mu in (0, 1) retains far more than 11,203 or leaves no head class at 5,000
    for mu in (0.5, 0.9, 0.99):
        r = literal_retained_counts(10, 5000, mu)
        assert not (r[0] == 5000 and 11190 <= r.sum() <= 11215)


def test_profile_is_non_increasing_and_balanced_at_one():
    r = retained_counts(7, 300, 37.5)
    assert np.all(np.diff(r) <= 0)
    np.testing.assert_array_equal(retained_counts(5, 40, 1.0), [40] * 5)


def test_profile_errors():
    with pytest.raises(ValueError, match=">= 1"):
        retained_counts(10, 500, 0.5)
    with pytest.raises(ValueError, match="no examples"):
        retained_counts(10, 50, 1000)


def test_make_long_tailed():
    ds = balanced(k=4, per=30)
    lt = make_long_tailed(ds, 10, seed=1)
    np.testing.assert_array_equal(lt.class_counts, retained_counts(4, 30, 10))
    assert make_long_tailed(ds, 1, seed=1) is ds
    assert make_long_tailed(lt, 1, seed=3) is lt
    again = make_long_tailed(ds, 10, seed=1)
    np.testing.assert_array_equal(again.features, lt.features)
    # retained rows are genuine rows of the source
    src = {tuple(r) for r in ds.features}
    assert all(tuple(r) in src for r in lt.features)
    with pytest.raises(ValueError, match="balanced"):
        make_long_tailed(lt, 2, seed=0)


def test_imbalance_factor():
    assert compute_imbalance_factor(balanced()) == 1.0
    assert compute_imbalance_factor(retained_counts(10, 5000, 200)) == 200.0
    assert compute_imbalance_factor([10, 10, 5]) == 2.0


# ---------------------------------------------------------------- dev holdout


def test_holdout_dev_partition():
    ds = balanced(k=10, per=15)
    t, d = holdout_dev(ds, 10, seed=4)
    assert len(d) == 100
    np.testing.assert_array_equal(d.class_counts, [10] * 10)
    rows = lambda s: {tuple(r) for r in s.features}  # noqa: E731
    assert rows(t) | rows(d) == rows(ds) and not rows(t) & rows(d)
    t2, d2 = holdout_dev(ds, 10, seed=4)
    np.testing.assert_array_equal(d2.features, d.features)
    with pytest.raises(ValueError, match="cannot hold out"):
        holdout_dev(ds, 15, seed=0)


# ---------------------------------------------------------------- synthetic data


def test_class_means_have_requested_separation():
    m = gaussian_class_means(5, 8, 3.0, seed=0)
    dist = np.linalg.norm(m[:, None] - m[None], axis=-1)
    np.testing.assert_allclose(dist[~np.eye(5, dtype=bool)], 3.0, rtol=1e-12)


def test_synth_counts_and_determinism():
    a = synth_gaussian_longtail(6, 4, 20, 100, 3.0, seed=2)
    np.testing.assert_array_equal(a.class_counts, retained_counts(6, 100, 20))
    b = synth_gaussian_longtail(6, 4, 20, 100, 3.0, seed=2)
    np.testing.assert_array_equal(a.features, b.features)
    assert np.all(np.diff(synth_gaussian_longtail(6, 4, 1, 50, 3.0, seed=0).class_counts) == 0)


def test_benchmark_splits_keep_profile():
    t, d, test = synth_benchmark_splits(5, 6, 50, 200, 4.0, 10, 20, seed=0)
    np.testing.assert_array_equal(t.class_counts, retained_counts(5, 200, 50))
    np.testing.assert_array_equal(d.class_counts, [10] * 5)
    np.testing.assert_array_equal(test.class_counts, [20] * 5)


def test_well_separated_classes_are_linearly_separable():
    train_set, _, test = synth_benchmark_splits(10, 20, 1, 100, 12.0, 1, 100, seed=0)
    spec = ModelSpec("mlp", (20,), 10, hidden=(), seed=0)
    cfg = TrainConfig(lr=0.05, stage1_steps=100, stage2_steps=0, batch_size=50, mode="vanilla")
    result = train(spec, train_set, None, cfg, test)
    assert result.metrics[-1]["top1_error"] < 0.05


# ---------------------------------------------------------------- ingest / export


def test_csv_roundtrip_is_exact(tmp_path):
    ds = LabeledDataset(np.array([[0.1, -2.5e-7], [1 / 3, 7.0]]), [1, 0], 2)
    p = tmp_path / "two.csv"
    export(ds, p, "csv")
    back = ingest(p, "csv")
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_errors_name_the_line(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DataFormatError, match="empty"):
        ingest(empty, "csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1.0,2.0\n1,abc,3.0\n")
    with pytest.raises(DataFormatError, match=r"bad.csv:2"):
        ingest(bad, "csv")
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("0,1.0,2.0\n1,3.0\n")
    with pytest.raises(DataFormatError, match=r":2"):
        ingest(ragged, "csv")
    with pytest.raises(FileNotFoundError):
        ingest(tmp_path / "missing.csv", "csv")


def test_cifar_binary_three_records(tmp_path):
    rng = np.random.default_rng(0)
    raw = bytearray()
    for label in (3, 0, 9):
        raw += bytes([label]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(raw))
    ds = ingest(p, "cifar_binary")
    assert len(ds) == 3 and ds.feature_shape == (3072,)
    np.testing.assert_array_equal(ds.labels, [3, 0, 9])
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert ds.features[0, 0] == raw[1] / 255.0
    images = ingest(p, "cifar_binary", as_images=True)
    assert images.feature_shape == (32, 32, 3)
    # red plane first in the file, channel-last in memory
    assert images.features[0, 0, 1, 0] == raw[2] / 255.0
    out = tmp_path / "again.bin"
    export(ds, out, "cifar_binary")
    assert out.read_bytes() == bytes(raw)


def test_cifar_binary_truncation_names_offset(tmp_path):
    p = tmp_path / "short.bin"
    p.write_bytes(bytes(3073 + 100))
    with pytest.raises(DataFormatError, match="byte offset 3073"):
        ingest(p, "cifar_binary")


def test_idx_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, size=(4, 5, 6), dtype=np.uint8)
    ds = LabeledDataset(pixels[..., None] / 255.0, [0, 1, 2, 1], 3)
    p = tmp_path / "train-images.idx"
    export(ds, p, "idx_images")
    assert (tmp_path / "train-labels.idx").exists()
    back = ingest(p, "idx_images")
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    header = bytes([0, 0, 8, 3]) + struct.pack(">3I", 4, 5, 6)
    assert p.read_bytes()[:16] == header
    bad = tmp_path / "bad-images.idx"
    bad.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DataFormatError, match="magic at byte offset 0"):
        ingest(bad, "idx_images")
    short = tmp_path / "short-images.idx"
    short.write_bytes(header + bytes(10))
    with pytest.raises(DataFormatError, match="byte offset 16"):
        ingest(short, "idx_images")


def test_dataset_validation():
    with pytest.raises(ValueError, match="labels"):
        LabeledDataset(np.zeros((2, 1)), [0, 5], 2)
    with pytest.raises(ValueError, match="finite"):
        LabeledDataset(np.array([[np.inf]]), [0], 1)
    with pytest.raises(ValueError, match="rows"):
        LabeledDataset(np.zeros((3, 1)), [0], 1)
