from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from src.utils.errors import ConfigurationError


@dataclass(frozen=True)
class OptimizerConfig:
    """优化器配置

    Adam 的"默认参数"固定为 lr=0.001, β1=0.9, β2=0.999, ε=1e-8。
    learning_rate=0 允许使用，表示空步（参数逐位不变）。
    """

    algorithm: str = "adam"
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("sgd_momentum", "adam"):
            raise ConfigurationError(f"unknown optimizer: {self.algorithm}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")


class Optimizer:
    """带状态的优化器：SGD+动量 或 Adam（按参数位置保存状态）"""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.step_count = 0
        self._state: Dict[Tuple[int, str], Tuple[np.ndarray, np.ndarray]] = {}

    def step(self, model) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for i, layer in enumerate(model.layers):
            for name, param in layer.params.items():
                grad = layer.grads[name]
                first, second = self._state.get((i, name), (np.zeros(param.shape), np.zeros(param.shape)))
                if cfg.algorithm == "adam":
                    first = cfg.beta1 * first + (1 - cfg.beta1) * grad
                    second = cfg.beta2 * second + (1 - cfg.beta2) * grad * grad
                    m_hat = first / (1 - cfg.beta1 ** t)
                    v_hat = second / (1 - cfg.beta2 ** t)
                    update = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
                    param[...] = (param.astype(np.float64) - update).astype(param.dtype)
                else:
                    # Keras 风格动量：v = m·v − lr·g；w = w + v
                    first = cfg.momentum * first - cfg.learning_rate * grad
                    param[...] = (param.astype(np.float64) + first).astype(param.dtype)
                self._state[(i, name)] = (first, second)
