import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Tuple

import numpy as np

from src.core.keygen import SecretKey
from src.core.trigger import TriggerRole, TriggerSet, synth_set
from src.rules.decision_rules import (DecisionParams, chernoff_fn_bound, chernoff_fp_bound,
                                      rule_matches)
from src.utils.datasets import Dataset
from src.utils.errors import ConfigurationError, ProtocolError
from src.utils.streams import StreamId

# 配置日志
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

VERIFY_STREAM = "trigger.verify"

# 未配置账本文件时，进程内按密钥指纹记录下一个可用的流序号
_ISSUED: Dict[str, int] = {}
_ISSUE_LOCK = threading.Lock()


class BlackBox(Protocol):
    """只需要 predict 的黑盒模型（Model、量化模型、JPEG包装模型都满足）"""

    num_classes: int

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        ...


def score_triggers(model: BlackBox, triggers: TriggerSet, key: SecretKey,
                   rule: str = "plain") -> Tuple[float, np.ndarray, np.ndarray]:
    """查询黑盒并统计命中

    Returns:
        (ρ, 每个查询的预测类别, 每个查询是否命中)，顺序与合成顺序一致
    """
    if len(triggers) == 0:
        raise ConfigurationError("cannot compute rho on an empty trigger set")
    if triggers.role == TriggerRole.EMBED:
        raise ProtocolError("embed-role triggers must never be used to measure the watermark")
    if triggers.key_fingerprint != key.fingerprint:
        logger.warning("触发集与密钥指纹不一致")
    probs = model.predict(triggers.images())
    hits = rule_matches(probs, key.mu, rule)
    return int(hits.sum()) / len(triggers), probs.argmax(axis=1), hits


def compute_rho(model: BlackBox, s_d: TriggerSet, key: SecretKey, rule: str = "plain") -> float:
    """ρ = 命中数 / n_d"""
    rho, _, _ = score_triggers(model, s_d, key, rule)
    return rho


@dataclass
class VerificationReport:
    rho: float
    n_d: int
    tau: float
    decision: str
    fp_bound: float
    fn_bound: float
    key_fingerprint: str
    rule: str
    rho_n: float
    rho_p: float
    p_fp: float
    p_fn: float
    stream_id: str
    matches: int
    trace: List[int] = field(default_factory=list)

    @property
    def watermarked(self) -> bool:
        return self.decision == "watermarked"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def verdict_line(self) -> str:
        mark = "✅" if self.watermarked else "❌"
        return (f"{mark} {self.decision}: rho={self.rho:.4f} ({self.matches}/{self.n_d}) tau={self.tau:.4f} "
                f"fp<={self.fp_bound:.3g} fn<={self.fn_bound:.3g} key={self.key_fingerprint}")


class OwnershipVerifier:
    """所有权验证核心类

    每次验证都在 trigger.verify 子流上使用新的序号，保证从不复用查询样本。
    给定账本文件时序号持久化到文件中，使多次命令行调用之间也不重复；
    否则使用进程内的登记表。
    """

    def __init__(self, key: SecretKey, params: Optional[DecisionParams] = None, rule: str = "plain",
                 ledger_path: Optional[str] = None):
        """初始化验证器

        Args:
            key: Owner 交给 Verifier 的密钥
            params: 判决参数，缺省使用 (ρ_N, ρ_P) = (0.5, 0.8)、P_fp = P_fn = 0.05
            rule: plain / weighted
            ledger_path: 记录下一个流序号的账本文件
        """
        self.key = key
        self.params = (params or DecisionParams()).resolved()
        self.rule = rule
        self.ledger_path = ledger_path
        self.next_index = self._read_ledger()

    def _read_ledger(self) -> int:
        if not self.ledger_path or not os.path.exists(self.ledger_path):
            return 0
        with open(self.ledger_path, "r", encoding="utf-8") as f:
            return int(json.load(f).get(self.key.fingerprint, 0))

    def _write_ledger(self) -> None:
        if not self.ledger_path:
            return
        data = {}
        if os.path.exists(self.ledger_path):
            with open(self.ledger_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        data[self.key.fingerprint] = self.next_index
        with open(self.ledger_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)

    def _next_stream(self) -> StreamId:
        fingerprint = self.key.fingerprint
        with _ISSUE_LOCK:
            if not self.ledger_path:
                self.next_index = max(self.next_index, _ISSUED.get(fingerprint, 0))
            stream = StreamId(self.key.master_seed, VERIFY_STREAM, self.next_index)
            self.next_index += 1
            _ISSUED[fingerprint] = max(_ISSUED.get(fingerprint, 0), self.next_index)
            self._write_ledger()
        return stream

    def verify(self, model: BlackBox, test: Dataset, stream: Optional[StreamId] = None) -> VerificationReport:
        """合成新的 S_d，查询黑盒并判决

        Args:
            model: 被检查的黑盒模型
            test: 测试集（S_d 的来源池）
            stream: 指定的验证子流（缺省分配下一个未用序号）

        Returns:
            VerificationReport
        """
        p = self.params
        stream = stream or self._next_stream()
        s_d = synth_set(self.key, test, p.n_d, TriggerRole.VERIFY, stream)
        rho, predicted, hits = score_triggers(model, s_d, self.key, self.rule)
        report = VerificationReport(
            rho=rho,
            n_d=p.n_d,
            tau=p.tau,
            decision="watermarked" if rho > p.tau else "not-watermarked",
            fp_bound=chernoff_fp_bound(p.tau, p.rho_n, p.n_d),
            fn_bound=chernoff_fn_bound(p.tau, p.rho_p, p.n_d),
            key_fingerprint=self.key.fingerprint,
            rule=self.rule,
            rho_n=p.rho_n,
            rho_p=p.rho_p,
            p_fp=p.p_fp,
            p_fn=p.p_fn,
            stream_id=str(stream),
            matches=int(hits.sum()),
            trace=[int(c) for c in predicted],
        )
        logger.info(f"验证完成: rho={rho:.4f} n_d={p.n_d} tau={p.tau:.4f} 判决={report.decision} "
                    f"(stream {stream})")
        return report


def verify_model(model: BlackBox, key: SecretKey, params: DecisionParams, test: Dataset,
                 stream_index: Optional[int] = None, rule: str = "plain") -> VerificationReport:
    """单次验证；不给 stream_index 时从进程内登记表分配下一个未用的流序号"""
    verifier = OwnershipVerifier(key, params, rule)
    if stream_index is None:
        return verifier.verify(model, test)
    with _ISSUE_LOCK:
        _ISSUED[key.fingerprint] = max(_ISSUED.get(key.fingerprint, 0), stream_index + 1)
    return verifier.verify(model, test, StreamId(key.master_seed, VERIFY_STREAM, stream_index))
