import numpy as np

from src.utils.errors import ConfigurationError

PROB_FLOOR = 1e-12


def cross_entropy_soft(pred: np.ndarray, target: np.ndarray) -> float:
    """软标签交叉熵 −Σ target_i · log(pred_i)

    Args:
        pred: 预测概率向量（长度C，和为1）
        target: 目标概率向量（长度C，和为1）

    Returns:
        交叉熵
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ConfigurationError(f"length mismatch: pred {pred.shape} vs target {target.shape}")
    for label, vec in (("pred", pred), ("target", target)):
        if abs(vec.sum() - 1.0) > 1e-6:
            raise ConfigurationError(f"{label} does not sum to 1: {vec.sum()}")
    return float(-(target * np.log(np.maximum(pred, PROB_FLOOR))).sum())


def batch_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """一个批次的平均软标签交叉熵"""
    if probs.shape != targets.shape:
        raise ConfigurationError(f"length mismatch: probs {probs.shape} vs targets {targets.shape}")
    return float(-(targets * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1).mean())


def softmax_cross_entropy_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """平均交叉熵对 softmax 输入（logits）的梯度"""
    return (probs * targets.sum(axis=1, keepdims=True) - targets) / probs.shape[0]
