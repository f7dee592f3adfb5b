"""MXWM 模型容器

布局（小端）：
    b"MXWM" | u16 版本 | u16 长度 + 架构名 | u8 维数 + u32×维数 输入形状 | u32 类别数
    | u32 张量数 | 每个张量: u16 层号, u8 长度 + 参数名, u8 维数, u32×维数
    | float32 参数负载 | u32 CRC32（覆盖之前的全部字节）
"""

import logging
import os
import struct
import zlib
from typing import List, Tuple

import numpy as np

from src.models.architectures import build_architecture
from src.models.network import Model
from src.utils.errors import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"MXWM"
FORMAT_VERSION = 1


def model_to_bytes(model: Model) -> bytes:
    header = bytearray(MAGIC)
    header += struct.pack("<H", FORMAT_VERSION)
    name = model.name.encode("utf-8")
    header += struct.pack("<H", len(name)) + name
    header += struct.pack("<B", len(model.input_shape))
    header += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    header += struct.pack("<I", model.num_classes)
    params = list(model.parameters())
    header += struct.pack("<I", len(params))
    payload = bytearray()
    for layer_index, pname, value in params:
        key = pname.encode("ascii")
        header += struct.pack("<HB", layer_index, len(key)) + key
        header += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        payload += np.ascontiguousarray(value, dtype="<f4").tobytes()
    body = bytes(header + payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated model file")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise FormatError("truncated model file")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def model_from_bytes(data: bytes) -> Model:
    if len(data) < 10 or data[:4] != MAGIC:
        raise FormatError("bad magic, not an MXWM model file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC32 mismatch")
    reader = _Reader(body)
    reader.raw(4)
    (version,) = reader.take("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported MXWM version {version}")
    (name_len,) = reader.take("<H")
    name = reader.raw(name_len).decode("utf-8")
    (ndim,) = reader.take("<B")
    input_shape = reader.take(f"<{ndim}I")
    (num_classes,) = reader.take("<I")
    (count,) = reader.take("<I")
    table: List[Tuple[int, str, Tuple[int, ...]]] = []
    for _ in range(count):
        layer_index, key_len = reader.take("<HB")
        pname = reader.raw(key_len).decode("ascii")
        (pdim,) = reader.take("<B")
        table.append((layer_index, pname, reader.take(f"<{pdim}I")))

    try:
        model = build_architecture(name, input_shape, num_classes)
    except ConfigurationError as e:
        raise FormatError(f"model file names an unusable architecture: {e}")
    expected = [(i, n, v.shape) for i, n, v in model.parameters()]
    if expected != [(i, n, tuple(s)) for i, n, s in table]:
        raise FormatError("shape table does not match the architecture")
    for layer_index, pname, shape in table:
        size = int(np.prod(shape)) * 4
        values = np.frombuffer(reader.raw(size), dtype="<f4").reshape(shape)
        model.layers[layer_index].params[pname] = values.astype(model.param_dtype)
    if reader.pos != len(body):
        raise FormatError("trailing bytes after parameter payload")
    return model


def save_model(model: Model, path: str) -> None:
    """写出 MXWM 文件（参数以32位保存）"""
    if model.param_dtype != np.float32:
        logger.warning("模型参数为64位，写入MXWM时将截断为32位")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))
    logger.info(f"模型已保存: {path}")


def load_model(path: str) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
