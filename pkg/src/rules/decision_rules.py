"""所有权判决规则与 Chernoff 界"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.utils.errors import DomainError

# 判决规则：比较触发样本的预测类别与 argmax μ
DECISION_RULES = [
    {
        "id": "plain",
        "name": "直接比较",
        "description": "argmax_i m(x)_i == argmax_i μ_i。常数均匀输出的模型只会得到约 1/C。",
    },
    {
        "id": "weighted",
        "name": "μ加权比较",
        "description": "argmax_i μ_i·m(x)_i == argmax_i μ_i，公式的字面读法。常数均匀输出的模型会得到 ρ=1。",
    },
]

RULE_IDS = tuple(rule["id"] for rule in DECISION_RULES)


def rule_matches(probs: np.ndarray, mu: np.ndarray, rule: str = "plain") -> np.ndarray:
    """逐个查询判断是否命中

    Args:
        probs: 模型输出 (n, C)
        mu: 密钥中的 μ
        rule: plain / weighted

    Returns:
        布尔数组 (n,)
    """
    target = int(np.argmax(mu))
    if rule == "plain":
        return np.argmax(probs, axis=1) == target
    if rule == "weighted":
        return np.argmax(probs * mu[None, :], axis=1) == target
    raise DomainError(f"unknown decision rule: {rule}")


def _check_count(n_d: int) -> None:
    if n_d < 1:
        raise DomainError(f"n_d must be >= 1, got {n_d}")


def chernoff_fp_bound(tau: float, rho_n: float, n_d: int) -> float:
    """误报上界 P(ρ > τ) ≤ exp(−n_d (τ − ρ_N)²)"""
    _check_count(n_d)
    if not 0.0 <= rho_n < tau <= 1.0:
        raise DomainError(f"tau={tau} must lie in (rho_N={rho_n}, 1]")
    return math.exp(-n_d * (tau - rho_n) ** 2)


def chernoff_fn_bound(tau: float, rho_p: float, n_d: int) -> float:
    """漏报上界 P(ρ < τ) ≤ exp(−n_d (τ − ρ_P)²)"""
    _check_count(n_d)
    if not 0.0 <= tau < rho_p <= 1.0:
        raise DomainError(f"tau={tau} must lie in [0, rho_P={rho_p})")
    return math.exp(-n_d * (tau - rho_p) ** 2)


def required_samples(p_fp: float, p_fn: float, rho_p: float, rho_n: float) -> int:
    """满足两个错误率要求所需的最少查询数（自然对数）

    n_d ≥ ((√(−ln P_fp) + √(−ln P_fn)) / (ρ_P − ρ_N))²
    """
    for label, p in (("P_fp", p_fp), ("P_fn", p_fn)):
        if not 0.0 < p < 1.0:
            raise DomainError(f"{label}={p} must lie in (0, 1)")
    gap = rho_p - rho_n
    if gap <= 0:
        raise DomainError(f"degenerate gap: rho_P={rho_p} must exceed rho_N={rho_n}")
    return math.ceil(((math.sqrt(-math.log(p_fp)) + math.sqrt(-math.log(p_fn))) / gap) ** 2)


@dataclass(frozen=True)
class DecisionParams:
    """假设检验参数；n_d 与 tau 未给出时由 resolved() 补全"""

    rho_p: float = 0.8
    rho_n: float = 0.5
    p_fp: float = 0.05
    p_fn: float = 0.05
    tau: Optional[float] = None
    n_d: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.rho_n < self.rho_p <= 1.0:
            raise DomainError(f"need 0 <= rho_N < rho_P <= 1, got {self.rho_n}, {self.rho_p}")
        for label, p in (("P_fp", self.p_fp), ("P_fn", self.p_fn)):
            if not 0.0 < p < 1.0:
                raise DomainError(f"{label}={p} must lie in (0, 1)")
        if self.tau is not None and not self.rho_n < self.tau < self.rho_p:
            raise DomainError(f"tau={self.tau} outside (rho_N, rho_P)")
        if self.n_d is not None and self.n_d < 1:
            raise DomainError("n_d must be >= 1")

    def resolved(self) -> "DecisionParams":
        tau = self.tau if self.tau is not None else (self.rho_n + self.rho_p) / 2.0
        n_d = self.n_d if self.n_d is not None else required_samples(self.p_fp, self.p_fn, self.rho_p, self.rho_n)
        return DecisionParams(self.rho_p, self.rho_n, self.p_fp, self.p_fn, tau, n_d)
