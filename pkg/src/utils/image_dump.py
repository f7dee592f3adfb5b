import logging
import os
from typing import List

import numpy as np
from PIL import Image

from src.core.trigger import TriggerSet

logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0,1] 浮点图像转为8位，单通道去掉通道维"""
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return pixels[..., 0] if pixels.ndim == 3 and pixels.shape[-1] == 1 else pixels


def dump_triggers(triggers: TriggerSet, directory: str, limit: int = 0) -> List[str]:
    """把触发样本导出为PNG（仅用于查看，不参与任何计算）

    Args:
        triggers: 触发集
        directory: 输出目录
        limit: 最多导出几张，0 表示全部

    Returns:
        写出的文件路径
    """
    os.makedirs(directory, exist_ok=True)
    samples = triggers.samples[:limit] if limit else triggers.samples
    paths = []
    for i, sample in enumerate(samples):
        sources = "-".join(str(s) for s in sample.source_indices)
        path = os.path.join(directory, f"{triggers.role.value}_{i:04d}_{sample.pool}_{sources}.png")
        Image.fromarray(to_uint8(sample.image)).save(path)
        paths.append(path)
    logger.info(f"导出 {len(paths)} 张触发样本到 {directory}")
    return paths
