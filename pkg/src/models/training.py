import logging
from typing import Callable, List, Optional, Union

import numpy as np
from tqdm import tqdm

from src.models.layers import Softmax
from src.models.losses import batch_cross_entropy, softmax_cross_entropy_grad
from src.models.network import Model
from src.models.optim import Optimizer, OptimizerConfig
from src.utils.errors import NumericError, TrainingError

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, float], None]


def backward_and_step(model: Model, batch: np.ndarray, targets: np.ndarray,
                      opt: Union[Optimizer, OptimizerConfig]) -> float:
    """一次前向+反向+优化器更新

    Args:
        model: 训练模式下的模型
        batch: 输入批次
        targets: 软标签 (B, C)
        opt: 优化器；若传入配置，则用全新状态的优化器走一步

    Returns:
        批次平均损失
    """
    if not model.training:
        raise RuntimeError("backward_and_step requires training mode")
    optimizer = opt if isinstance(opt, Optimizer) else Optimizer(opt)
    targets = np.asarray(targets, dtype=np.float64)
    probs = model.forward(batch)
    loss = batch_cross_entropy(probs, targets)
    if isinstance(model.layers[-1], Softmax):
        # softmax 与交叉熵合并求导
        model.backward(softmax_cross_entropy_grad(probs, targets), stop=len(model.layers) - 1)
    else:
        grad = -targets / np.maximum(probs, 1e-12) / probs.shape[0]
        model.backward(grad)
    optimizer.step(model)
    return loss


def fit(model: Model, images: np.ndarray, targets: np.ndarray, config: OptimizerConfig,
        shuffle_rng: np.random.Generator, epoch_callback: Optional[EpochCallback] = None,
        batch_source: Optional[Callable[[int], tuple]] = None, desc: str = "train") -> List[float]:
    """按配置训练若干轮

    Args:
        model: 待训练模型
        images: 训练图像
        targets: 软标签
        config: 优化器配置（含 epochs、batch_size）
        shuffle_rng: 每轮打乱用的随机流
        epoch_callback: 每轮结束后调用 (epoch, loss)
        batch_source: 可选，按轮次返回 (images, targets)，用于每轮重新生成触发样本
        desc: 进度条标题

    Returns:
        每轮平均损失
    """
    optimizer = Optimizer(config)
    history: List[float] = []
    model.train()
    try:
        for epoch in range(config.epochs):
            if batch_source is not None:
                images, targets = batch_source(epoch)
            order = shuffle_rng.permutation(len(images))
            losses = []
            bar = tqdm(range(0, len(order), config.batch_size), desc=f"{desc} {epoch + 1}/{config.epochs}",
                       leave=False, disable=None)
            for start in bar:
                idx = order[start:start + config.batch_size]
                try:
                    loss = backward_and_step(model, images[idx], targets[idx], optimizer)
                except NumericError as e:
                    raise TrainingError(f"training diverged: {e}", epoch=epoch) from e
                losses.append(loss)
            epoch_loss = float(np.mean(losses)) if losses else 0.0
            if not np.isfinite(epoch_loss):
                raise TrainingError("loss is not finite", epoch=epoch)
            history.append(epoch_loss)
            if epoch_callback is not None:
                model.eval()
                epoch_callback(epoch, epoch_loss)
                model.train()
    finally:
        model.eval()
    return history


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]
