import copy
import logging
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.models.layers import COMPUTE_DTYPE, Dense, Dropout, Flatten, Layer
from src.utils.errors import ConfigurationError, InputShapeError, NumericError

logger = logging.getLogger(__name__)

# hook(边界序号, 激活) -> 激活；序号0为输入，i+1为第i层输出
BoundaryHook = Callable[[int, np.ndarray], np.ndarray]


class Model:
    """按顺序堆叠的层，带训练/推理两种模式

    推理模式下前向传播不写任何缓存，可以被多个线程同时调用。
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Tuple[int, ...], num_classes: int,
                 name: str = "custom", param_dtype=np.float32):
        self.layers: List[Layer] = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.name = name
        self.param_dtype = np.dtype(param_dtype)
        self.training = False

    def build(self, rng: np.random.Generator) -> "Model":
        """初始化所有层参数并检查输出维度"""
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.param_dtype)
        if shape != (self.num_classes,):
            raise ConfigurationError(f"final layer outputs {shape}, expected ({self.num_classes},)")
        return self

    # 模式切换
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    def set_dropout_generator(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def check_input(self, batch: np.ndarray) -> None:
        if batch.ndim != len(self.input_shape) + 1 or tuple(batch.shape[1:]) != self.input_shape:
            raise InputShapeError(f"batch shape {batch.shape} does not match model input {self.input_shape}")

    def forward(self, batch: np.ndarray, hook: Optional[BoundaryHook] = None) -> np.ndarray:
        """前向传播

        Args:
            batch: 形状为 (B, *input_shape) 的输入
            hook: 可选的层边界回调（量化攻击用来插入量化-反量化）

        Returns:
            (B, C) 的类别概率
        """
        batch = np.asarray(batch)
        self.check_input(batch)
        x = batch.astype(COMPUTE_DTYPE, copy=False)
        if not np.isfinite(x).all():
            raise NumericError("non-finite input")
        if hook is not None:
            x = hook(0, x)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training=self.training)
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite activation after {layer.describe()}", layer_index=i)
            if hook is not None:
                x = hook(i + 1, x)
        return x

    def backward(self, grad: np.ndarray, stop: Optional[int] = None) -> np.ndarray:
        """反向传播，grad 是对第 stop-1 层输出的梯度（stop 默认为层数）"""
        if not self.training:
            raise RuntimeError("backward requires training mode")
        stop = len(self.layers) if stop is None else stop
        for i in range(stop - 1, -1, -1):
            layer = self.layers[i]
            grad = layer.backward(grad)
            for name, g in layer.grads.items():
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {name} of {layer.describe()}", layer_index=i)
            if not np.isfinite(grad).all():
                raise NumericError(f"non-finite input gradient of {layer.describe()}", layer_index=i)
        return grad

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """分批推理（不改变模型模式）"""
        if len(images) == 0:
            return np.zeros((0, self.num_classes))
        was_training = self.training
        self.training = False
        try:
            return np.concatenate([self.forward(images[i:i + batch_size])
                                   for i in range(0, len(images), batch_size)])
        finally:
            self.training = was_training

    def parameters(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield i, name, value

    def gradients(self) -> Iterator[Tuple[int, str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, value in layer.grads.items():
                yield i, name, value

    def weight_count(self) -> int:
        """可训练权重数（不含偏置）"""
        return sum(v.size for _, name, v in self.parameters() if name == "kernel")

    def reset_head(self, rng: np.random.Generator) -> None:
        """重新初始化 flatten 之后的全部全连接层"""
        start = next((i for i, l in enumerate(self.layers) if isinstance(l, Flatten)), -1) + 1
        first = next(l for l in self.layers[start:] if isinstance(l, Dense))
        shape = (first.params["kernel"].shape[0],)
        for layer in self.layers[start:]:
            if isinstance(layer, Dense):
                shape = layer.build(shape, rng, self.param_dtype)
        logger.info(f"重新初始化分类头: 从第{start}层开始")

    def copy(self) -> "Model":
        for layer in self.layers:
            layer._cache = None
        return copy.deepcopy(self)

    def summary(self) -> str:
        return " -> ".join(layer.describe() for layer in self.layers)
