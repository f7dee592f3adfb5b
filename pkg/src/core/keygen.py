"""水印密钥生成：λ、μ 取自复合狄利克雷分布，x_o 为固定的可见叠加图"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import dirichlet

from src.utils.errors import ConfigurationError
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)

MAX_REDRAWS = 1000


@dataclass(frozen=True)
class KeyProfile:
    """密钥分布的参数：α 中恰有 m 个正数，其余为结构性零"""

    num_classes: int
    support_size: int
    alpha: Tuple[float, ...]
    seed: int

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if len(alpha) != self.num_classes:
            raise ConfigurationError(f"alpha has {len(alpha)} entries, expected {self.num_classes}")
        if any(a < 0 or not math.isfinite(a) for a in alpha):
            raise ConfigurationError("alpha entries must be finite and nonnegative")
        positive = sum(a > 0 for a in alpha)
        if positive != self.support_size or not 1 <= self.support_size <= self.num_classes:
            raise ConfigurationError(
                f"alpha has {positive} positive entries, support_size is {self.support_size}")
        if self.seed < 0:
            raise ConfigurationError("seed must be nonnegative")

    @property
    def positive_alpha(self) -> np.ndarray:
        return np.array([a for a in self.alpha if a > 0])


def default_profile(num_classes: int, support_size: int = 2, seed: int = 0, value: float = 1.0) -> KeyProfile:
    """默认配置：支撑集上的均匀狄利克雷"""
    if not 1 <= support_size <= num_classes:
        raise ConfigurationError(f"support_size must be in [1, {num_classes}]")
    alpha = [value] * support_size + [0.0] * (num_classes - support_size)
    return KeyProfile(num_classes, support_size, tuple(alpha), seed)


@dataclass(frozen=True)
class SecretKey:
    """水印密钥 (λ, μ, x_o)"""

    lam: np.ndarray
    mu: np.ndarray
    overlay: np.ndarray
    num_classes: int
    support_size: int
    alpha: Tuple[float, ...]
    master_seed: int
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    @property
    def target_class(self) -> int:
        return int(np.argmax(self.mu))

    @property
    def mixing_classes(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.lam > 0))

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for array in (self.lam, self.mu, self.overlay):
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def profile(self) -> KeyProfile:
        return KeyProfile(self.num_classes, self.support_size, self.alpha, self.master_seed)


def sample_weight_vector(profile: KeyProfile, rng: np.random.Generator) -> np.ndarray:
    """从复合狄利克雷分布抽取一个权重向量

    先在 m 个正 α 上抽狄利克雷，其余位置填零，再对全部 C 个位置做均匀随机置换。

    Args:
        profile: 密钥分布参数
        rng: 随机流

    Returns:
        单纯形上长度为C的向量，恰有 m 个非零元
    """
    m = profile.support_size
    for _ in range(MAX_REDRAWS):
        if m == 1:
            weights = np.ones(1)
        else:
            weights = dirichlet.rvs(profile.positive_alpha, random_state=rng)[0]
        # 极小的 α 可能让某个分量下溢为0，此时支撑集大小会不对
        if np.all(weights > 0):
            break
    else:
        raise ConfigurationError("alpha too small: Dirichlet draws keep underflowing to zero")
    vector = np.zeros(profile.num_classes)
    vector[:m] = weights / weights.sum()
    return vector[rng.permutation(profile.num_classes)]


def make_overlay(image_shape: Sequence[int]) -> np.ndarray:
    """左上角的白色实心圆，半径 r=⌈min(H,W)/8⌉，圆心 (r+1, r+1)"""
    if len(image_shape) != 3:
        raise ConfigurationError(f"overlay needs an H×W×C shape, got {tuple(image_shape)}")
    height, width, channels = image_shape
    if height < 8 or width < 8 or channels < 1:
        raise ConfigurationError(f"image shape {tuple(image_shape)} too small for the overlay")
    r = math.ceil(min(height, width) / 8)
    rows, cols = np.mgrid[0:height, 0:width]
    disk = (rows - (r + 1)) ** 2 + (cols - (r + 1)) ** 2 <= r * r
    return np.repeat(disk[..., None], channels, axis=2).astype(np.float64)


def _has_unique_argmax(vector: np.ndarray) -> bool:
    return int(np.sum(vector == vector.max())) == 1


def generate_key(profile: KeyProfile, image_shape: Sequence[int],
                 overlay: Optional[np.ndarray] = None) -> SecretKey:
    """生成密钥：λ 与 μ 来自两个独立子流

    Args:
        profile: 密钥分布参数（seed 为主种子）
        image_shape: 图像形状 H×W×C
        overlay: 给定叠加图（伪造者模拟时使用已知的 x_o）

    Returns:
        SecretKey
    """
    lam = sample_weight_vector(profile, StreamId(profile.seed, "keygen.lambda").generator())
    mu_rng = StreamId(profile.seed, "keygen.mu").generator()
    mu = sample_weight_vector(profile, mu_rng)
    redraws = 0
    while not _has_unique_argmax(mu):
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise ConfigurationError("could not draw a mu with a unique argmax")
        mu = sample_weight_vector(profile, mu_rng)
    if redraws:
        logger.debug(f"μ 的最大值不唯一，重抽 {redraws} 次")
    if overlay is None:
        overlay = make_overlay(image_shape)
    elif tuple(overlay.shape) != tuple(image_shape):
        raise ConfigurationError(f"overlay shape {overlay.shape} does not match {tuple(image_shape)}")
    return SecretKey(lam=lam, mu=mu, overlay=np.asarray(overlay, dtype=np.float64),
                     num_classes=profile.num_classes, support_size=profile.support_size,
                     alpha=profile.alpha, master_seed=profile.seed)
