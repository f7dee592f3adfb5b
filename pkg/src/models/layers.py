"""网络层

图像张量统一采用 NHWC 布局。参数按存储精度保存（默认32位），
前向/反向计算一律转换为64位进行，保证归约在64位下累加。
"""

from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.utils.errors import ConfigurationError

COMPUTE_DTYPE = np.float64


def he_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He均匀初始化，边界为 sqrt(6/fan_in)"""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """层的基类"""

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def build(self, input_shape: Tuple[int, ...], rng: np.random.Generator, dtype) -> Tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    def _param(self, name: str) -> np.ndarray:
        return self.params[name].astype(COMPUTE_DTYPE, copy=False)


def _relu_forward(z: np.ndarray, activation: Optional[str]):
    if activation == "relu":
        mask = z > 0
        return z * mask, mask
    return z, None


def _check_activation(activation: Optional[str]) -> None:
    if activation not in (None, "relu"):
        raise ConfigurationError(f"unsupported activation: {activation}")


class Conv2D(Layer):
    """二维卷积（步长1，valid 或 same 填充）"""

    kind = "conv2d"

    def __init__(self, filters: int, kernel: int, activation: Optional[str] = "relu", padding: str = "valid"):
        super().__init__()
        _check_activation(activation)
        if padding not in ("valid", "same"):
            raise ConfigurationError(f"unsupported padding: {padding}")
        if kernel % 2 == 0 and padding == "same":
            raise ConfigurationError("same padding requires an odd kernel")
        self.filters = filters
        self.kernel = kernel
        self.activation = activation
        self.padding = padding

    def _pad(self) -> int:
        return self.kernel // 2 if self.padding == "same" else 0

    def build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise ConfigurationError(f"conv2d expects H×W×C input, got {input_shape}")
        h, w, c = input_shape
        p = self._pad()
        ho, wo = h + 2 * p - self.kernel + 1, w + 2 * p - self.kernel + 1
        if ho <= 0 or wo <= 0:
            raise ConfigurationError(f"input {input_shape} too small for kernel {self.kernel}")
        fan_in = self.kernel * self.kernel * c
        self.params = {
            "kernel": he_uniform((self.kernel, self.kernel, c, self.filters), fan_in, rng).astype(dtype),
            "bias": np.zeros(self.filters, dtype=dtype),
        }
        return (ho, wo, self.filters)

    def forward(self, x, training=False):
        p = self._pad()
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        k = self.kernel
        windows = sliding_window_view(x, (k, k), axis=(1, 2))  # (B, Ho, Wo, C, k, k)
        b, ho, wo, c = windows.shape[:4]
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
        w = self._param("kernel").reshape(k * k * c, self.filters)
        z = cols @ w + self._param("bias")
        out, mask = _relu_forward(z, self.activation)
        if training:
            self._cache = (cols, mask, x.shape, (b, ho, wo))
        return out.reshape(b, ho, wo, self.filters)

    def backward(self, grad):
        cols, mask, padded_shape, (b, ho, wo) = self._cache
        k, c = self.kernel, padded_shape[3]
        g = grad.reshape(b * ho * wo, self.filters)
        if mask is not None:
            g = g * mask
        self.grads = {
            "kernel": (cols.T @ g).reshape(k, k, c, self.filters),
            "bias": g.sum(axis=0),
        }
        w = self._param("kernel").reshape(k * k * c, self.filters)
        dcols = (g @ w.T).reshape(b, ho, wo, k, k, c)
        dx = np.zeros(padded_shape, dtype=COMPUTE_DTYPE)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        p = self._pad()
        if p:
            dx = dx[:, p:-p, p:-p, :]
        return dx

    def describe(self):
        return f"conv{self.filters}(k{self.kernel},{self.activation or 'linear'})"


class MaxPool2D(Layer):
    """不重叠最大池化，余下的行列被丢弃"""

    kind = "maxpool2d"

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def build(self, input_shape, rng, dtype):
        h, w, c = input_shape
        ho, wo = h // self.window, w // self.window
        if ho == 0 or wo == 0:
            raise ConfigurationError(f"input {input_shape} too small for pooling window {self.window}")
        return (ho, wo, c)

    def forward(self, x, training=False):
        p = self.window
        b, h, w, c = x.shape
        ho, wo = h // p, w // p
        blocks = (x[:, :ho * p, :wo * p, :]
                  .reshape(b, ho, p, wo, p, c)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(b, ho, wo, c, p * p))
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        if training:
            self._cache = (idx, x.shape)
        return out

    def backward(self, grad):
        idx, in_shape = self._cache
        p = self.window
        b, h, w, c = in_shape
        ho, wo = h // p, w // p
        blocks = np.zeros((b, ho, wo, c, p * p), dtype=COMPUTE_DTYPE)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(in_shape, dtype=COMPUTE_DTYPE)
        dx[:, :ho * p, :wo * p, :] = (blocks
                                     .reshape(b, ho, wo, c, p, p)
                                     .transpose(0, 1, 4, 2, 5, 3)
                                     .reshape(b, ho * p, wo * p, c))
        return dx

    def describe(self):
        return f"maxpool{self.window}"


class Dense(Layer):
    """全连接层"""

    kind = "dense"

    def __init__(self, units: int, activation: Optional[str] = "relu"):
        super().__init__()
        _check_activation(activation)
        self.units = units
        self.activation = activation

    def build(self, input_shape, rng, dtype):
        if len(input_shape) != 1:
            raise ConfigurationError(f"dense expects a flat input, got {input_shape}")
        fan_in = input_shape[0]
        self.params = {
            "kernel": he_uniform((fan_in, self.units), fan_in, rng).astype(dtype),
            "bias": np.zeros(self.units, dtype=dtype),
        }
        return (self.units,)

    def forward(self, x, training=False):
        z = x @ self._param("kernel") + self._param("bias")
        out, mask = _relu_forward(z, self.activation)
        if training:
            self._cache = (x, mask)
        return out

    def backward(self, grad):
        x, mask = self._cache
        g = grad * mask if mask is not None else grad
        self.grads = {"kernel": x.T @ g, "bias": g.sum(axis=0)}
        return g @ self._param("kernel").T

    def describe(self):
        return f"dense{self.units}({self.activation or 'linear'})"


class Dropout(Layer):
    """反向缩放的dropout，推理模式下为恒等映射"""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None

    def build(self, input_shape, rng, dtype):
        self.rng = rng
        return input_shape

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            if training:
                self._cache = None
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = keep
        return x * keep

    def backward(self, grad):
        if self._cache is None:
            return grad
        return grad * self._cache

    def describe(self):
        return f"dropout{self.rate}"


class Flatten(Layer):
    kind = "flatten"

    def build(self, input_shape, rng, dtype):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training=False):
        shifted = np.exp(x - x.max(axis=1, keepdims=True))
        out = shifted / shifted.sum(axis=1, keepdims=True)
        if training:
            self._cache = out
        return out

    def backward(self, grad):
        p = self._cache
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))
