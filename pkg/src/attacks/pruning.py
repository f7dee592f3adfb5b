import logging
import math

import numpy as np

from src.models.network import Model
from src.utils.errors import DomainError

logger = logging.getLogger(__name__)


def prune(model: Model, k: float, rng: np.random.Generator) -> Model:
    """随机剪枝：在全部卷积核/全连接权重中无放回地均匀选出 round(k·W) 个置零

    偏置不参与剪枝，原模型不被修改。

    Args:
        model: 源模型
        k: 剪枝率 [0,1]
        rng: attack.prune 子流

    Returns:
        剪枝后的新模型
    """
    if not 0.0 <= k <= 1.0:
        raise DomainError(f"pruning rate {k} outside [0, 1]")
    pruned = model.copy()
    kernels = [value for _, name, value in pruned.parameters() if name == "kernel"]
    total = sum(v.size for v in kernels)
    count = int(math.floor(k * total + 0.5))
    if count == 0:
        return pruned
    chosen = np.sort(rng.choice(total, size=count, replace=False))
    start = 0
    for value in kernels:
        end = start + value.size
        lo, hi = np.searchsorted(chosen, [start, end])
        np.put(value, chosen[lo:hi] - start, 0.0)
        start = end
    logger.info(f"剪枝: k={k:.3f}, 置零 {count}/{total} 个权重")
    return pruned
