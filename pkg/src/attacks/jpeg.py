"""基线JPEG往返（不含色度下采样与熵编码）"""

import logging

import numpy as np
from scipy.fftpack import dct, idct

from src.utils.errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

BLOCK = 8

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

# JFIF 的 RGB -> YCbCr（Cb、Cr 偏移 128）
_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


def _check_quality(quality: int) -> None:
    if not 1 <= int(quality) <= 100 or int(quality) != quality:
        raise DomainError(f"JPEG quality {quality} outside [1, 100]")


def quality_scale(quality: int) -> int:
    _check_quality(quality)
    quality = int(quality)
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """按 IJG 规则缩放量化表"""
    scale = quality_scale(quality)
    return np.clip((base * scale + 50) // 100, 1, 255)


def block_dct(blocks: np.ndarray) -> np.ndarray:
    """对最后两维为 8×8 的块做正交二维DCT"""
    return dct(dct(blocks, axis=-1, norm="ortho"), axis=-2, norm="ortho")


def block_idct(coefficients: np.ndarray) -> np.ndarray:
    return idct(idct(coefficients, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def _to_blocks(planes: np.ndarray) -> np.ndarray:
    n, h, w = planes.shape
    return planes.reshape(n, h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    n, bh, bw = blocks.shape[:3]
    return blocks.transpose(0, 1, 3, 2, 4).reshape(n, bh * BLOCK, bw * BLOCK)


def _roundtrip_planes(planes: np.ndarray, table: np.ndarray) -> np.ndarray:
    """(N,H,W) 取值 [0,255] 的通道平面做 DCT-量化-反量化-IDCT"""
    n, h, w = planes.shape
    pad_h, pad_w = -h % BLOCK, -w % BLOCK
    padded = np.pad(planes, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    coefficients = block_dct(_to_blocks(padded - 128.0))
    restored = block_idct(np.round(coefficients / table) * table) + 128.0
    return _from_blocks(restored)[:, :h, :w]


def jpeg_filter(image: np.ndarray, quality: int) -> np.ndarray:
    """JPEG压缩再解压

    Args:
        image: 单张 (H,W,C) 或一批 (N,H,W,C) 图像，像素位于 [0,1]，C 为 1 或 3
        quality: 质量因子 [1,100]

    Returns:
        同形状的 [0,1] 图像
    """
    _check_quality(quality)
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] not in (1, 3):
        raise ConfigurationError(f"JPEG filter expects 1 or 3 channel images, got {np.shape(image)}")
    pixels = x * 255.0
    luma = scaled_table(LUMA_TABLE, quality)
    if pixels.shape[-1] == 1:
        out = _roundtrip_planes(pixels[..., 0], luma)[..., None]
    else:
        chroma = scaled_table(CHROMA_TABLE, quality)
        ycc = pixels @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET
        planes = [_roundtrip_planes(ycc[..., c], luma if c == 0 else chroma) for c in range(3)]
        out = (np.stack(planes, axis=-1) - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T
    out = np.clip(out / 255.0, 0.0, 1.0)
    return out[0] if single else out


class JpegFilteredModel:
    """查询前先对输入做JPEG往返的包装模型"""

    def __init__(self, model, quality: int):
        _check_quality(quality)
        self.model = model
        self.quality = int(quality)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def input_shape(self):
        return self.model.input_shape

    @property
    def name(self) -> str:
        return f"{self.model.name}+jpeg{self.quality}"

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        filtered = jpeg_filter(images, self.quality) if len(images) else images
        return self.model.predict(filtered, batch_size=batch_size)
