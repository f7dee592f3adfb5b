import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.utils.errors import ConfigurationError, DataError, FormatError
from src.utils.streams import derive_generator

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass(frozen=True)
class Dataset:
    """图像数据集，像素位于[0,1]，NHWC"""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    partition: str = "full"
    _pools: Dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def validate(self, require_all_classes: bool = True) -> "Dataset":
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: images {self.images.shape} vs labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: label outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"{self.name}: pixel outside [0,1]")
        if require_all_classes:
            missing = sorted(set(range(self.num_classes)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise DataError(f"{self.name}: empty class pools {missing}")
        return self

    def class_pool(self, cls: int) -> np.ndarray:
        """某类样本的索引数组（缓存）"""
        if cls not in self._pools:
            self._pools[cls] = np.flatnonzero(self.labels == cls)
        return self._pools[cls]

    def subset(self, indices: Sequence[int], partition: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.name, self.num_classes,
                       partition or self.partition)

    def with_partition(self, partition: str) -> "Dataset":
        return replace(self, partition=partition, _pools={})


@dataclass(frozen=True)
class SplitDataset:
    """训练集按80/10/10划分，测试集为原始测试集"""

    train: Dataset
    validation: Dataset
    finetune: Dataset
    test: Dataset

    def by_partition(self, partition: str) -> Dataset:
        if partition not in ("train", "validation", "finetune", "test"):
            raise ConfigurationError(f"unknown partition: {partition}")
        return getattr(self, partition)


def _open(path: str):
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_all(path: str) -> bytes:
    try:
        with _open(path) as f:
            return f.read()
    except (OSError, EOFError) as e:
        raise FormatError(f"cannot read {path}: {e}")


def load_idx(images_path: str, labels_path: str, name: str = "mnist",
             require_all_classes: bool = True) -> Dataset:
    """读取 MNIST IDX 文件（可为.gz）

    Args:
        images_path: 图像文件
        labels_path: 标签文件
        require_all_classes: 10个类别都必须出现，缺类时抛 DataError

    Returns:
        像素缩放到[0,1]的数据集
    """
    raw_images = _read_all(images_path)
    raw_labels = _read_all(labels_path)
    if len(raw_images) < 16 or len(raw_labels) < 8:
        raise FormatError("truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image-file magic 0x{magic:08x}")
    label_magic, label_count = struct.unpack(">II", raw_labels[:8])
    if label_magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label-file magic 0x{label_magic:08x}")
    if count != label_count:
        raise FormatError(f"count mismatch: {count} images vs {label_count} labels")
    expected = count * rows * cols
    if len(raw_images) - 16 != expected:
        raise FormatError(f"image payload is {len(raw_images) - 16} bytes, header says {expected}")
    if len(raw_labels) - 8 != count:
        raise FormatError(f"label payload is {len(raw_labels) - 8} bytes, header says {count}")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16).reshape(count, rows, cols, 1)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    if count and labels.max() >= 10:
        raise FormatError("label byte >= 10")
    images = pixels.astype(np.float32) / np.float32(255.0)
    logger.info(f"读取IDX数据: {count} 张 {rows}×{cols}")
    return Dataset(images, labels, name, 10).validate(require_all_classes)


def load_cifar10_binary(batch_paths: Sequence[str], name: str = "cifar10",
                        require_all_classes: bool = True) -> Dataset:
    """读取 CIFAR-10 二进制批次（每条记录 1 字节标签 + 3072 字节通道平面像素），默认要求10类齐全"""
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in batch_paths:
        raw = _read_all(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records[:, 0].max() >= 10:
            raise FormatError(f"{path}: label byte >= 10")
        labels.append(records[:, 0].astype(np.int64))
        # 通道平面 (3, 32, 32) -> HWC
        planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(planes.transpose(0, 2, 3, 1))
    pixels = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    dataset = Dataset(pixels, np.concatenate(labels), name, 10)
    logger.info(f"读取CIFAR-10数据: {len(dataset)} 张")
    return dataset.validate(require_all_classes)


def _blob_templates(num_classes: int, height: int, width: int, channels: int) -> np.ndarray:
    """每类一个亮斑模板，斑点中心均匀分布在以图像中心为圆心的圆周上"""
    side = min(height, width)
    rows, cols = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ring = 0.28 * side
    sigma = side / 10.0
    templates = np.empty((num_classes, height, width, channels))
    for i in range(num_classes):
        angle = 2 * np.pi * i / num_classes
        y, x = cy + ring * np.sin(angle), cx + ring * np.cos(angle)
        bump = np.exp(-((rows - y) ** 2 + (cols - x) ** 2) / (2 * sigma ** 2))
        templates[i] = bump[..., None]
    return templates


def synth_blobs(num_classes: int, per_class: int, height: int, width: int, channels: int,
                seed: int, name: str = "blobs") -> Dataset:
    """合成的桌面规模数据集：每类一个固定位置的亮斑，加 σ=0.1 的高斯噪声

    Args:
        num_classes: 类别数（≥2）
        per_class: 每类样本数
        height, width, channels: 图像形状
        seed: 随机种子

    Returns:
        按类别顺序排列的数据集
    """
    if num_classes < 2:
        raise ConfigurationError("synth_blobs needs at least 2 classes")
    if per_class < 1 or min(height, width, channels) < 1:
        raise ConfigurationError("synth_blobs needs positive sizes")
    rng = derive_generator(seed, "data.blobs")
    templates = _blob_templates(num_classes, height, width, channels)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(0.0, 0.1, size=(len(labels), height, width, channels))
    images = np.clip(templates[labels] + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), name, num_classes).validate()


def split_80_10_10(dataset: Dataset, seed: int, test: Optional[Dataset] = None) -> SplitDataset:
    """把训练集打乱后划分为 80% 训练 / 10% 验证 / 10% 微调

    Args:
        dataset: 原始训练集
        seed: 打乱种子
        test: 原始测试集（缺省时测试集为空）

    Returns:
        SplitDataset
    """
    n = len(dataset)
    if n < 10:
        raise ConfigurationError(f"split_80_10_10 needs at least 10 samples, got {n}")
    order = derive_generator(seed, "data.split").permutation(n)
    n_train, n_val = (8 * n) // 10, n // 10
    if test is None:
        test = dataset.subset([], partition="test")
    return SplitDataset(
        train=dataset.subset(order[:n_train], partition="train"),
        validation=dataset.subset(order[n_train:n_train + n_val], partition="validation"),
        finetune=dataset.subset(order[n_train + n_val:], partition="finetune"),
        test=test.with_partition("test"),
    )


def _find(data_dir: str, candidates: Sequence[str]) -> str:
    for candidate in candidates:
        for suffix in ("", ".gz"):
            path = os.path.join(data_dir, candidate + suffix)
            if os.path.exists(path):
                return path
    raise DataError(f"none of {list(candidates)} found in {data_dir}")


def load_dataset(name: str, data_dir: str, seed: int, full: bool = False, mnist_subset: int = 8000,
                 blobs_per_class: int = 500, blobs_test_per_class: int = 100,
                 blobs_shape=(28, 28, 1), blobs_classes: int = 10) -> SplitDataset:
    """按名称载入并划分数据集

    Args:
        name: blobs / mnist / cifar10
        data_dir: 数据目录（MIXER_DATA_DIR 或 --data-dir）
        seed: 主种子
        full: 为 False 时 MNIST 只取子集
        mnist_subset: 子集大小

    Returns:
        SplitDataset
    """
    if name == "blobs":
        h, w, c = blobs_shape
        train = synth_blobs(blobs_classes, blobs_per_class, h, w, c, seed)
        test = synth_blobs(blobs_classes, blobs_test_per_class, h, w, c, seed + 1)
    elif name == "mnist":
        train = load_idx(_find(data_dir, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]),
                         _find(data_dir, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]))
        test = load_idx(_find(data_dir, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]),
                        _find(data_dir, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]))
        if not full and len(train) > mnist_subset:
            pick = np.sort(derive_generator(seed, "data.subset").choice(len(train), mnist_subset, replace=False))
            train = train.subset(pick).validate()
            logger.info(f"使用MNIST子集: {mnist_subset} 张")
    elif name == "cifar10":
        base = os.path.join(data_dir, "cifar-10-batches-bin")
        base = base if os.path.isdir(base) else data_dir
        train = load_cifar10_binary([_find(base, [f"data_batch_{i}.bin"]) for i in range(1, 6)])
        test = load_cifar10_binary([_find(base, ["test_batch.bin"])])
    else:
        raise ConfigurationError(f"unknown dataset: {name}")
    return split_80_10_10(train, seed, test)
