"""Mixer 的异常类型"""

from typing import Optional


class MixerError(Exception):
    """所有Mixer错误的基类"""


class ConfigurationError(MixerError, ValueError):
    """配置或参数不合法（未知架构、缺少校准集等）"""


class InputShapeError(MixerError, ValueError):
    """输入张量形状与模型不匹配"""


class NumericError(MixerError, ArithmeticError):
    """前向/反向传播中出现NaN或Inf"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"{message} (layer {layer_index})"
        super().__init__(message)
        self.layer_index = layer_index


class FormatError(MixerError, ValueError):
    """文件格式错误：魔数、截断、记录长度、校验和"""


class DataError(MixerError, ValueError):
    """数据内容错误，例如某个类别的样本池为空"""


class ProtocolError(MixerError, ValueError):
    """触发集角色与样本池不匹配"""


class TrainingError(MixerError, RuntimeError):
    """训练发散"""

    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class DomainError(MixerError, ValueError):
    """统计参数超出定义域"""
