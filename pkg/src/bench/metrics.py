"""评估指标：TA、Rec_tr、Rec_ts 与伪造者成功率 USR"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest
from tqdm import tqdm

from src.core.keygen import KeyProfile, SecretKey, generate_key
from src.core.trigger import TriggerRole, synth_set
from src.core.verifier import BlackBox, score_triggers
from src.utils.datasets import Dataset
from src.utils.errors import ConfigurationError, DataError
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    """表格中的一行；未定义的指标为 None，失败的攻击行 status 以 failed 开头"""

    scenario: str
    ta: Optional[float] = None
    rec_tr: Optional[float] = None
    rec_ts: Optional[float] = None
    status: str = "ok"

    def __post_init__(self):
        for name in ("ta", "rec_tr", "rec_ts"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise ConfigurationError(f"{name}={value} outside [0, 100]")

    @property
    def failed(self) -> bool:
        return self.status.startswith("failed")

    def cells(self) -> Tuple:
        return self.scenario, self.ta, self.rec_tr, self.rec_ts


def test_accuracy(model: BlackBox, test: Dataset) -> float:
    """原任务上的测试准确率（百分比）"""
    if len(test) == 0:
        raise DataError("test set is empty")
    predicted = model.predict(test.images).argmax(axis=1)
    return 100.0 * float(np.mean(predicted == test.labels))


def recovery(model: BlackBox, key: SecretKey, pool: Dataset, n: int = 1000,
             stream: Optional[StreamId] = None, rule: str = "plain") -> float:
    """水印恢复率：在 pool 上合成 n 个 measure 触发样本，返回 100·ρ

    pool 为训练集时得到 Rec_tr，为测试集时得到 Rec_ts。
    """
    stream = stream or StreamId(key.master_seed, f"trigger.measure.{pool.partition}")
    triggers = synth_set(key, pool, n, TriggerRole.MEASURE, stream)
    rho, _, _ = score_triggers(model, triggers, key, rule)
    return 100.0 * rho


@dataclass(frozen=True)
class UsurperModel:
    """伪造者掌握的知识：m、密钥分布 α 与叠加图 x_o，但不知道 λ、μ"""

    num_classes: int
    support_size: int
    alpha: Tuple[float, ...]
    overlay: np.ndarray
    n_keys: int = 1000
    n_per_key: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_keys < 1 or self.n_per_key < 1:
            raise ConfigurationError("n_keys and n_per_key must be positive")

    @classmethod
    def from_key(cls, key: SecretKey, n_keys: int = 1000, n_per_key: int = 100, seed: int = 0) -> "UsurperModel":
        return cls(key.num_classes, key.support_size, key.alpha, key.overlay, n_keys, n_per_key, seed)

    def fake_seeds(self) -> np.ndarray:
        return StreamId(self.seed, "usurper.keys").generator().integers(0, 2 ** 62, size=self.n_keys)

    def fake_key(self, fake_seed: int) -> SecretKey:
        profile = KeyProfile(self.num_classes, self.support_size, self.alpha, int(fake_seed))
        return generate_key(profile, self.overlay.shape, overlay=self.overlay)


@dataclass
class UsurperReport:
    rate: float
    per_key: List[float] = field(default_factory=list)
    exceed_count: int = 0
    tau: float = 0.65
    ci_low: float = 0.0
    ci_high: float = 0.0
    stderr: float = 0.0

    @property
    def n_keys(self) -> int:
        return len(self.per_key)

    def to_dict(self) -> dict:
        return {
            "USR": self.rate,
            "n_keys": self.n_keys,
            "exceed_count": self.exceed_count,
            "tau": self.tau,
            "ci95": [self.ci_low, self.ci_high],
            "key_stderr": self.stderr,
        }


def usurper_success_rate(model: BlackBox, usurper: UsurperModel, pool: Dataset, tau: float = 0.65,
                         keys: Optional[Sequence[SecretKey]] = None, rule: str = "plain") -> UsurperReport:
    """伪造者成功率：对每个伪造密钥，用它的 λ 合成触发样本、用它的 μ 计算 ρ，再对密钥取平均

    Args:
        model: 被声明所有权的模型
        usurper: 伪造者的知识
        pool: 触发样本的来源池（测试集）
        tau: 统计 ρ > τ 的伪造密钥个数
        keys: 直接给定伪造密钥（缺省按 usurper 生成 n_keys 个）
        rule: plain / weighted

    Returns:
        UsurperReport
    """
    if keys is None:
        keys = [usurper.fake_key(s) for s in usurper.fake_seeds()]
    rhos: List[float] = []
    hits = 0
    for index, fake in enumerate(tqdm(keys, desc="usurper", leave=False, disable=None)):
        triggers = synth_set(fake, pool, usurper.n_per_key, TriggerRole.MEASURE,
                             StreamId(usurper.seed, "usurper.triggers", index))
        rho, _, matched = score_triggers(model, triggers, fake, rule)
        rhos.append(rho)
        hits += int(matched.sum())
    queries = len(rhos) * usurper.n_per_key
    ci = binomtest(hits, queries).proportion_ci(confidence_level=0.95, method="exact")
    values = np.array(rhos)
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    report = UsurperReport(
        rate=100.0 * float(values.mean()),
        per_key=rhos,
        exceed_count=int(np.sum(values > tau)),
        tau=tau,
        ci_low=100.0 * float(ci.low),
        ci_high=100.0 * float(ci.high),
        stderr=100.0 * stderr,
    )
    logger.info(f"USR={report.rate:.2f}% ({len(rhos)} 个伪造密钥, ρ>τ 的有 {report.exceed_count} 个, "
                f"95%区间 [{report.ci_low:.2f}, {report.ci_high:.2f}])")
    return report
