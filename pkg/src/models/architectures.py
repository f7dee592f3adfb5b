"""MNIST 与 CIFAR-10 的两种CNN结构，外加测试用的小型MLP"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.models.layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Softmax
from src.models.network import Model
from src.models.optim import OptimizerConfig
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

# 完整规模的训练配方；轮数可由配置覆盖
DEFAULT_RECIPES = {
    "mnist_cnn": {"algorithm": "adam", "learning_rate": 0.001, "batch_size": 64, "epochs": 100},
    "cifar10_cnn": {"algorithm": "sgd_momentum", "learning_rate": 0.001, "momentum": 0.9,
                    "batch_size": 64, "epochs": 200},
    "mlp": {"algorithm": "adam", "learning_rate": 0.001, "batch_size": 64, "epochs": 20},
}


def _mnist_layers(num_classes: int) -> List[Layer]:
    return [
        Conv2D(64, 5, "relu"), MaxPool2D(2),
        Conv2D(128, 5, "relu"), MaxPool2D(2),
        Flatten(),
        Dense(256, "relu"),
        Dense(num_classes, None),
        Softmax(),
    ]


def _cifar10_layers(num_classes: int) -> List[Layer]:
    layers: List[Layer] = []
    for filters in (32, 64, 128, 256):
        layers += [Conv2D(filters, 3, "relu", padding="same"),
                   Conv2D(filters, 3, "relu", padding="same"),
                   MaxPool2D(2), Dropout(0.2)]
    layers += [Flatten(), Dense(128, "relu"), Dropout(0.2), Dense(256, "relu"),
               Dense(num_classes, None), Softmax()]
    return layers


def _mlp_layers(hidden: Sequence[int], num_classes: int) -> List[Layer]:
    return [Flatten()] + [Dense(h, "relu") for h in hidden] + [Dense(num_classes, None), Softmax()]


def parse_architecture(name: str) -> Tuple[str, Tuple[int, ...]]:
    """解析架构名，mlp 可带隐藏层宽度，例如 "mlp:64,32" """
    base, _, arg = name.partition(":")
    if base not in DEFAULT_RECIPES:
        raise ConfigurationError(f"unknown architecture: {name}")
    if base != "mlp":
        if arg:
            raise ConfigurationError(f"architecture {base} takes no arguments")
        return base, ()
    try:
        hidden = tuple(int(h) for h in arg.split(",") if h) if arg else (64,)
    except ValueError:
        raise ConfigurationError(f"bad mlp widths: {arg}")
    if any(h < 1 for h in hidden):
        raise ConfigurationError(f"bad mlp widths: {arg}")
    return base, hidden


def build_architecture(name: str, input_shape: Sequence[int], num_classes: int,
                       rng: Optional[np.random.Generator] = None, param_dtype=np.float32) -> Model:
    """按名称构建并初始化模型

    Args:
        name: mnist_cnn / cifar10_cnn / mlp[:h1,h2,...]
        input_shape: H×W×C
        num_classes: 类别数C
        rng: 初始化用随机流
        param_dtype: 参数存储精度（梯度检查时用 float64）

    Returns:
        初始化好的模型（推理模式）
    """
    base, hidden = parse_architecture(name)
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if base == "mnist_cnn":
        layers = _mnist_layers(num_classes)
    elif base == "cifar10_cnn":
        layers = _cifar10_layers(num_classes)
    else:
        layers = _mlp_layers(hidden, num_classes)
    canonical = base if base != "mlp" else "mlp:" + ",".join(str(h) for h in hidden)
    model = Model(layers, tuple(input_shape), num_classes, name=canonical, param_dtype=param_dtype)
    model.build(rng if rng is not None else np.random.default_rng(0))
    logger.debug(f"构建模型 {canonical}: {model.summary()}")
    return model


def default_optimizer(name: str, epochs: Optional[int] = None, **overrides) -> OptimizerConfig:
    """架构对应的训练配方"""
    base, _ = parse_architecture(name)
    recipe = dict(DEFAULT_RECIPES[base])
    if epochs is not None:
        recipe["epochs"] = epochs
    recipe.update(overrides)
    return OptimizerConfig(**recipe)
