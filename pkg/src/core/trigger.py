"""mixup 触发样本的合成"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Set, Tuple

import numpy as np

from src.core.keygen import SecretKey
from src.utils.datasets import Dataset
from src.utils.errors import ConfigurationError, DataError, ProtocolError
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)


class TriggerRole(str, Enum):
    EMBED = "embed"
    VERIFY = "verify"
    MEASURE = "measure"


# 每种角色允许使用的样本池
ALLOWED_POOLS = {
    TriggerRole.EMBED: {"train"},
    TriggerRole.VERIFY: {"test"},
    TriggerRole.MEASURE: {"train", "validation", "test"},
}


@dataclass(frozen=True)
class TriggerSample:
    image: np.ndarray
    soft_label: np.ndarray
    pool: str
    source_indices: Tuple[int, ...]


@dataclass
class TriggerSet:
    samples: List[TriggerSample]
    role: TriggerRole
    key_fingerprint: str
    stream_id: str
    pool: str = ""
    _images: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0,))
        return self._images

    def soft_labels(self) -> np.ndarray:
        return np.stack([s.soft_label for s in self.samples]) if self.samples else np.zeros((0,))

    def source_tuples(self) -> List[Tuple[int, ...]]:
        return [s.source_indices for s in self.samples]

    def duplicate_sources(self) -> int:
        """来源元组重复的样本数"""
        seen: Set[Tuple[int, ...]] = set()
        duplicates = 0
        for sources in self.source_tuples():
            if sources in seen:
                duplicates += 1
            seen.add(sources)
        return duplicates


def synth_trigger(key: SecretKey, dataset: Dataset, rng: np.random.Generator) -> TriggerSample:
    """按 x̃ = clip(Σ λ_i X_i + x_o) 生成一个触发样本

    每个 λ_i > 0 的类别从该类样本池中均匀抽取一张图（有放回，每个触发样本重新抽）。
    软标签 ỹ = Σ μ_i y_i，y_i 为独热向量。

    Args:
        key: 密钥
        dataset: 源图像池
        rng: 随机流

    Returns:
        TriggerSample
    """
    if dataset.image_shape != key.overlay.shape:
        raise ConfigurationError(f"dataset images {dataset.image_shape} vs overlay {key.overlay.shape}")
    mix = np.zeros(key.overlay.shape, dtype=np.float64)
    sources = []
    for cls in key.mixing_classes:
        pool = dataset.class_pool(cls)
        if len(pool) == 0:
            raise DataError(f"class {cls} has no images in {dataset.name}/{dataset.partition}")
        index = int(pool[rng.integers(len(pool))])
        sources.append(index)
        mix += key.lam[cls] * dataset.images[index].astype(np.float64)
    image = np.clip(mix + key.overlay, 0.0, 1.0)
    basis = np.eye(key.num_classes)
    soft_label = (key.mu[:, None] * basis).sum(axis=0)
    return TriggerSample(image=image, soft_label=soft_label, pool=dataset.partition,
                         source_indices=tuple(sources))


def synth_set(key: SecretKey, dataset: Dataset, n: int, role: TriggerRole, stream: StreamId) -> TriggerSet:
    """生成 n 个触发样本

    Args:
        key: 密钥
        dataset: 样本池，其 partition 必须符合角色要求
        n: 样本数（≥1）
        role: embed / verify / measure
        stream: 该集合专用的随机子流

    Returns:
        TriggerSet
    """
    role = TriggerRole(role)
    if n < 1:
        raise ConfigurationError("trigger set size must be >= 1")
    if dataset.partition not in ALLOWED_POOLS[role]:
        raise ProtocolError(f"{role.value} triggers cannot be drawn from the {dataset.partition} pool")
    rng = stream.generator()
    samples = [synth_trigger(key, dataset, rng) for _ in range(n)]
    logger.debug(f"生成触发集: role={role.value} pool={dataset.partition} n={n} stream={stream}")
    return TriggerSet(samples=samples, role=role, key_fingerprint=key.fingerprint,
                      stream_id=str(stream), pool=dataset.partition)


def empty_set(key: SecretKey, role: TriggerRole = TriggerRole.EMBED) -> TriggerSet:
    return TriggerSet(samples=[], role=TriggerRole(role), key_fingerprint=key.fingerprint,
                      stream_id="-", pool="train")
