import os
import sys

import numpy as np
import pytest

# 添加项目根目录到系统路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.keygen import default_profile, generate_key
from src.models.architectures import build_architecture
from src.utils.datasets import split_80_10_10, synth_blobs

TINY_CLASSES = 4
TINY_SHAPE = (8, 8, 1)


@pytest.fixture(scope="session")
def tiny_split():
    """4类 8×8 的小型合成数据，每类60张训练图、25张测试图"""
    h, w, c = TINY_SHAPE
    train = synth_blobs(TINY_CLASSES, 60, h, w, c, seed=7)
    test = synth_blobs(TINY_CLASSES, 25, h, w, c, seed=8)
    return split_80_10_10(train, seed=7, test=test)


@pytest.fixture(scope="session")
def tiny_key():
    return generate_key(default_profile(TINY_CLASSES, 2, seed=11), TINY_SHAPE)


@pytest.fixture
def tiny_mlp():
    return build_architecture("mlp:16", TINY_SHAPE, TINY_CLASSES, rng=np.random.default_rng(3))


class ConstantModel:
    """总是以最高概率输出同一个类别的黑盒"""

    def __init__(self, cls, num_classes):
        self.cls = cls
        self.num_classes = num_classes

    def predict(self, images, batch_size=128):
        probs = np.full((len(images), self.num_classes), 0.5 / (self.num_classes - 1))
        probs[:, self.cls] = 0.5
        return probs


class KeyOracle:
    """对任何输入都输出 μ 的黑盒（完美水印）"""

    def __init__(self, mu):
        self.mu = np.asarray(mu)
        self.num_classes = len(mu)

    def predict(self, images, batch_size=128):
        return np.tile(self.mu, (len(images), 1))


class RandomModel:
    """类别均匀随机的预测器"""

    def __init__(self, num_classes, seed=0):
        self.num_classes = num_classes
        self.rng = np.random.default_rng(seed)

    def predict(self, images, batch_size=128):
        return self.rng.dirichlet(np.ones(self.num_classes), size=len(images))
