"""命名随机流

所有随机性都从一个主种子派生：每个用途（密钥生成、触发样本、训练打乱、攻击……）
拿到自己的子流。底层是计数器型的 Philox 生成器，子流由 SeedSequence 的
spawn_key 区分，因此各子流相互独立且可复现。
"""

import zlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StreamId:
    """一个可复现的随机子流标识"""

    master_seed: int
    name: str
    index: int = 0

    def generator(self) -> np.random.Generator:
        return derive_generator(self.master_seed, self.name, self.index)

    def advance(self, step: int = 1) -> "StreamId":
        return StreamId(self.master_seed, self.name, self.index + step)

    def __str__(self) -> str:
        return f"{self.name}#{self.index}"


def derive_generator(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """根据(主种子, 名称, 序号)派生生成器

    Args:
        master_seed: 主种子（记录在密钥文件中）
        name: 子流名称，例如 "trigger.verify"
        index: 同名子流的序号

    Returns:
        Philox 生成器
    """
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    tag = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(tag, index))
    return np.random.Generator(np.random.Philox(seq))
