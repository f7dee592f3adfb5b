import gzip
import logging
import os
import struct

import numpy as np
import pytest

from src.core.keygen import default_profile, generate_key
from src.utils.datasets import load_cifar10_binary, load_dataset, load_idx, split_80_10_10, synth_blobs
from src.utils.errors import DataError, FormatError
from src.utils.key_store import load_json, load_key, read_csv, save_key, save_report, write_csv
from src.utils.streams import StreamId, derive_generator


def write_idx(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801, gz=False):
    count, rows, cols = pixels.shape
    image_bytes = struct.pack(">IIII", image_magic, count, rows, cols) + pixels.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", label_magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    opener = gzip.open if gz else open
    suffix = ".gz" if gz else ""
    images_path = os.path.join(tmp_path, "images" + suffix)
    labels_path = os.path.join(tmp_path, "labels" + suffix)
    with opener(images_path, "wb") as f:
        f.write(image_bytes)
    with opener(labels_path, "wb") as f:
        f.write(label_bytes)
    return images_path, labels_path


def test_idx_scaling_endpoints(tmp_path):
    pixels = np.zeros((2, 3, 3), dtype=np.uint8)
    pixels[0, 0, 0] = 255
    data = load_idx(*write_idx(tmp_path, pixels, [3, 7]), require_all_classes=False)
    assert data.image_shape == (3, 3, 1)
    assert data.images[0, 0, 0, 0] == 1.0
    assert data.images[1, 2, 2, 0] == 0.0
    assert data.labels.tolist() == [3, 7]


def test_idx_gzip_accepted(tmp_path):
    pixels = np.full((1, 2, 2), 51, dtype=np.uint8)
    data = load_idx(*write_idx(tmp_path, pixels, [1], gz=True), require_all_classes=False)
    assert data.images[0, 0, 0, 0] == pytest.approx(0.2)


def test_idx_rejects_bad_magic(tmp_path):
    pixels = np.zeros((1, 2, 2), dtype=np.uint8)
    with pytest.raises(FormatError, match="magic"):
        load_idx(*write_idx(tmp_path, pixels, [0], image_magic=0x801))
    with pytest.raises(FormatError, match="magic"):
        load_idx(*write_idx(tmp_path, pixels, [0], label_magic=0x803))


def test_idx_rejects_truncated_payload_and_count_mismatch(tmp_path):
    images_path, labels_path = write_idx(tmp_path, np.zeros((3, 4, 4), dtype=np.uint8), [0, 1, 2])
    with open(images_path, "rb") as f:
        raw = f.read()
    with open(images_path, "wb") as f:
        f.write(raw[:-5])
    with pytest.raises(FormatError):
        load_idx(images_path, labels_path)
    with pytest.raises(FormatError, match="count"):
        load_idx(*write_idx(tmp_path, np.zeros((3, 4, 4), dtype=np.uint8), [0, 1]))


def test_cifar_records_are_channel_planar(tmp_path):
    record = np.zeros(3073, dtype=np.uint8)
    record[0] = 6
    record[1:1025] = 255  # 红色通道
    path = os.path.join(tmp_path, "data_batch_1.bin")
    record.tofile(path)
    data = load_cifar10_binary([path], require_all_classes=False)
    assert data.image_shape == (32, 32, 3)
    assert data.labels.tolist() == [6]
    assert np.all(data.images[0, :, :, 0] == 1.0)
    assert np.all(data.images[0, :, :, 1:] == 0.0)


def test_cifar_rejects_bad_records(tmp_path):
    bad_label = np.zeros(3073, dtype=np.uint8)
    bad_label[0] = 10
    path = os.path.join(tmp_path, "bad.bin")
    bad_label.tofile(path)
    with pytest.raises(FormatError):
        load_cifar10_binary([path])
    np.zeros(3000, dtype=np.uint8).tofile(path)
    with pytest.raises(FormatError):
        load_cifar10_binary([path])


def test_real_loaders_require_every_class(tmp_path):
    pixels = np.zeros((10, 2, 2), dtype=np.uint8)
    assert len(load_idx(*write_idx(tmp_path, pixels, list(range(10))))) == 10
    # 缺少类别 9 的 IDX 文件
    with pytest.raises(DataError, match="empty class"):
        load_idx(*write_idx(tmp_path, pixels, [0, 1, 2, 3, 4, 5, 6, 7, 8, 8]))

    records = np.zeros((10, 3073), dtype=np.uint8)
    records[:, 0] = np.arange(10)
    path = os.path.join(tmp_path, "data_batch_1.bin")
    records.tofile(path)
    assert len(load_cifar10_binary([path])) == 10
    records[9, 0] = 0
    records.tofile(path)
    with pytest.raises(DataError, match=r"\[9\]"):
        load_cifar10_binary([path])


def test_load_dataset_rejects_mnist_files_with_an_empty_class(tmp_path):
    pixels = np.zeros((20, 4, 4), dtype=np.uint8)
    labels = [i % 9 for i in range(20)]
    for prefix in ("train", "t10k"):
        images_path, labels_path = write_idx(tmp_path, pixels, labels)
        os.replace(images_path, os.path.join(tmp_path, f"{prefix}-images-idx3-ubyte"))
        os.replace(labels_path, os.path.join(tmp_path, f"{prefix}-labels-idx1-ubyte"))
    with pytest.raises(DataError, match="empty class"):
        load_dataset("mnist", str(tmp_path), seed=0)


def test_synth_blobs_counts_and_determinism():
    a = synth_blobs(10, 100, 12, 12, 1, seed=5)
    b = synth_blobs(10, 100, 12, 12, 1, seed=5)
    assert len(a) == 1000
    assert np.bincount(a.labels).tolist() == [100] * 10
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_split_is_a_disjoint_partition():
    data = synth_blobs(4, 25, 8, 8, 1, seed=1)
    tagged = data.subset(np.arange(len(data)))
    split = split_80_10_10(tagged, seed=3)
    assert (len(split.train), len(split.validation), len(split.finetune)) == (80, 10, 10)
    assert (split.train.partition, split.validation.partition, split.finetune.partition, split.test.partition) == \
        ("train", "validation", "finetune", "test")
    again = split_80_10_10(tagged, seed=3)
    assert np.array_equal(split.train.images, again.train.images)
    # 像素向量作为指纹：三部分合起来正好是原数据集
    rows = lambda d: {d.images[i].tobytes() for i in range(len(d))}
    union = rows(split.train) | rows(split.validation) | rows(split.finetune)
    assert len(union) == 100 and union == rows(data)


def test_split_sizes_at_mnist_scale():
    n = 60000
    assert ((8 * n) // 10, n // 10, n - (8 * n) // 10 - n // 10) == (48000, 6000, 6000)


def test_load_dataset_blobs_and_missing_files(tmp_path):
    split = load_dataset("blobs", str(tmp_path), seed=2, blobs_per_class=20, blobs_test_per_class=5,
                         blobs_shape=(8, 8, 1), blobs_classes=3)
    assert len(split.train) == 48 and len(split.test) == 15
    with pytest.raises(DataError):
        load_dataset("mnist", str(tmp_path), seed=2)


def test_streams_are_named_and_reproducible():
    a = derive_generator(1, "trigger.verify", 0).random(4)
    assert np.array_equal(a, StreamId(1, "trigger.verify").generator().random(4))
    assert not np.array_equal(a, derive_generator(1, "trigger.verify", 1).random(4))
    assert not np.array_equal(a, derive_generator(1, "trigger.embed", 0).random(4))
    assert str(StreamId(1, "trigger.verify").advance(2)) == "trigger.verify#2"


def test_key_round_trip_is_exact(tmp_path):
    key = generate_key(default_profile(10, 3, seed=4), (28, 28, 1))
    path = str(tmp_path / "key.json")
    save_key(key, path)
    loaded = load_key(path)
    assert np.array_equal(loaded.lam, key.lam)
    assert np.array_equal(loaded.mu, key.mu)
    assert np.array_equal(loaded.overlay, key.overlay)
    assert loaded.fingerprint == key.fingerprint
    assert loaded.created == key.created


def test_world_readable_key_warns(tmp_path, caplog):
    key = generate_key(default_profile(4, 2, seed=1), (8, 8, 1))
    path = str(tmp_path / "key.json")
    old = os.umask(0o022)
    try:
        with caplog.at_level(logging.WARNING):
            save_key(key, path)
    finally:
        os.umask(old)
    assert any("chmod 600" in r.message for r in caplog.records)


def test_malformed_key_file_rejected(tmp_path):
    path = tmp_path / "key.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_key(str(path))
    path.write_text('{"version": 2}')
    with pytest.raises(FormatError):
        load_key(str(path))


def test_csv_formats_floats_and_missing(tmp_path):
    path = str(tmp_path / "t.csv")
    write_csv(path, ["scenario", "TA"], [("host", 99.0), ("x", None)])
    assert read_csv(path) == [{"scenario": "host", "TA": "99.0000"}, {"scenario": "x", "TA": "-"}]


class _Report:
    def to_dict(self):
        return {"rho": 0.9, "decision": "watermarked"}


def test_save_report_accepts_dicts_and_report_objects(tmp_path):
    path = str(tmp_path / "reports" / "r.json")
    save_report(_Report(), path)
    assert load_json(path) == {"rho": 0.9, "decision": "watermarked"}
    save_report({"USR": 25.0}, path)
    assert load_json(path) == {"USR": 25.0}
