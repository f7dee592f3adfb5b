"""训练后量化攻击

四种模式：
- dynamic: 权重按张量做有符号8位仿射量化，计算时反量化，激活不变
- full_uint8: 权重与各层边界激活都做 [0,255] 仿射量化，激活范围来自校准集
- full_int8: 权重对称量化 (零点为0)；激活按校准范围求出 [-128,127] 的仿射参数后把零点强制为0，
  非负激活的上半段超出 127 被截断 (INT8_OVERFLOW=saturate)，wrap 为按二进制补码回绕的变体
- float16: 所有参数舍入到最近的半精度值

卷积核与全连接权重参与整数量化，偏置保持浮点。
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple, Union

import numpy as np

from src.models.network import Model
from src.utils.datasets import Dataset
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

QUANT_MODES = ("dynamic", "full_uint8", "full_int8", "float16")
FULL_MODES = ("full_uint8", "full_int8")
OVERFLOW_POLICIES = ("wrap", "saturate")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    qmin: int
    qmax: int

    def quantize(self, values: np.ndarray) -> np.ndarray:
        codes = np.rint(np.asarray(values, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(codes, self.qmin, self.qmax).astype(np.int32)

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        return (codes.astype(np.float64) - self.zero_point) * self.scale


def affine_params(lo: float, hi: float, qmin: int, qmax: int) -> QuantParams:
    """仿射量化参数；范围总是包含0，保证0可以被精确表示"""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (qmax - qmin)
    if scale <= 0.0:
        scale = 1.0
    zero_point = int(np.clip(round(qmin - lo / scale), qmin, qmax))
    return QuantParams(scale, zero_point, qmin, qmax)


def symmetric_params(values: np.ndarray, bound: int = 127) -> QuantParams:
    peak = float(np.max(np.abs(values))) if np.size(values) else 0.0
    return QuantParams(peak / bound if peak > 0 else 1.0, 0, -bound, bound)


@dataclass
class QuantizedTensor:
    params: QuantParams
    codes: np.ndarray

    def dequantize(self) -> np.ndarray:
        return self.params.dequantize(self.codes)


def _weight_params(mode: str, values: np.ndarray) -> QuantParams:
    if mode == "dynamic":
        return affine_params(values.min(), values.max(), -128, 127)
    if mode == "full_uint8":
        return affine_params(values.min(), values.max(), 0, 255)
    return symmetric_params(values)


def _activation_params(mode: str, lo: float, hi: float) -> QuantParams:
    if mode == "full_uint8":
        return affine_params(lo, hi, 0, 255)
    return replace(affine_params(lo, hi, -128, 127), zero_point=0)


def calibrate(model: Model, images: np.ndarray, batch_size: int = 128) -> Dict[int, Tuple[float, float]]:
    """记录每个层边界（不含最终输出）的激活最小/最大值"""
    if len(images) == 0:
        raise ConfigurationError("calibration set is empty")
    last = len(model.layers)
    ranges: Dict[int, Tuple[float, float]] = {}

    def observe(index: int, x: np.ndarray) -> np.ndarray:
        if index < last:
            lo, hi = float(x.min()), float(x.max())
            if index in ranges:
                lo, hi = min(lo, ranges[index][0]), max(hi, ranges[index][1])
            ranges[index] = (lo, hi)
        return x

    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(images), batch_size):
            model.forward(images[start:start + batch_size], hook=observe)
    finally:
        model.training = was_training
    return ranges


class QuantizedModel:
    """量化后的模型：权重已替换为反量化值，全量化模式在每个层边界做量化-反量化"""

    def __init__(self, model: Model, mode: str, weight_tables: Optional[Dict[Tuple[int, str], QuantizedTensor]] = None,
                 activation_ranges: Optional[Dict[int, Tuple[float, float]]] = None, overflow: str = "saturate"):
        if mode not in QUANT_MODES:
            raise ConfigurationError(f"unknown quantization mode: {mode}")
        if overflow not in OVERFLOW_POLICIES:
            raise ConfigurationError(f"unknown int8 overflow policy: {overflow}")
        if mode in FULL_MODES and not activation_ranges:
            raise ConfigurationError(f"{mode} needs activation calibration ranges")
        self.model = model
        self.mode = mode
        self.overflow = overflow
        self.weight_tables = weight_tables or {}
        self.activation_ranges = dict(activation_ranges or {})
        self.activation_tables = {index: _activation_params(mode, lo, hi)
                                  for index, (lo, hi) in self.activation_ranges.items()} if mode in FULL_MODES else {}

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def input_shape(self):
        return self.model.input_shape

    @property
    def name(self) -> str:
        return f"{self.model.name}+{self.mode}"

    def _fake_quant(self, index: int, x: np.ndarray) -> np.ndarray:
        table = self.activation_tables.get(index)
        if table is None:
            return x
        if self.mode == "full_uint8" or self.overflow == "saturate":
            return table.dequantize(table.quantize(x))
        raw = np.rint(x / table.scale)
        return (np.mod(raw + 128.0, 256.0) - 128.0) * table.scale

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0, self.num_classes))
        hook = self._fake_quant if self.activation_tables else None
        self.model.eval()
        return np.concatenate([self.model.forward(images[i:i + batch_size], hook=hook)
                               for i in range(0, len(images), batch_size)])

    def dequantize(self) -> Dict[Tuple[int, str], np.ndarray]:
        """各量化张量的反量化值（64位）"""
        return {slot: table.dequantize() for slot, table in self.weight_tables.items()}

    def sidecar(self) -> Dict:
        return {
            "mode": self.mode,
            "overflow": self.overflow,
            "activation_ranges": {str(k): list(v) for k, v in sorted(self.activation_ranges.items())},
        }

    @classmethod
    def restore(cls, model: Model, sidecar: Dict) -> "QuantizedModel":
        ranges = {int(k): (float(v[0]), float(v[1])) for k, v in sidecar.get("activation_ranges", {}).items()}
        return cls(model, sidecar["mode"], activation_ranges=ranges, overflow=sidecar.get("overflow", "saturate"))


def quantize(model: Model, mode: str, calibration: Union[Dataset, np.ndarray, None] = None,
             overflow: str = "saturate") -> QuantizedModel:
    """对模型做训练后量化（原模型不变）

    Args:
        model: 源模型
        mode: dynamic / full_uint8 / full_int8 / float16
        calibration: 全量化模式需要的校准图像（默认取100张验证集图像）
        overflow: full_int8 激活越界策略 saturate（截断，默认）/ wrap

    Returns:
        QuantizedModel
    """
    if mode not in QUANT_MODES:
        raise ConfigurationError(f"unknown quantization mode: {mode}")
    ranges = None
    if mode in FULL_MODES:
        if calibration is None:
            raise ConfigurationError(f"{mode} quantization requires a calibration set")
        images = calibration.images if isinstance(calibration, Dataset) else np.asarray(calibration)
        ranges = calibrate(model, images)

    quantized = model.copy()
    tables: Dict[Tuple[int, str], QuantizedTensor] = {}
    for index, name, value in quantized.parameters():
        if mode == "float16":
            value[...] = value.astype(np.float16).astype(value.dtype)
            continue
        if name != "kernel":
            continue
        params = _weight_params(mode, value)
        table = QuantizedTensor(params, params.quantize(value))
        tables[(index, name)] = table
        value[...] = table.dequantize().astype(value.dtype)
    logger.info(f"量化: mode={mode}, 量化张量 {len(tables)} 个, 校准边界 {len(ranges or {})} 个")
    return QuantizedModel(quantized, mode, tables, ranges, overflow)
