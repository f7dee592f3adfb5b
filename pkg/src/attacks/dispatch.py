"""攻击的统一入口：解析命令行写法、施加攻击、保存/读取被攻击模型"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from config import ATTACK_CONFIG
from src.attacks.finetune import FinetuneConfig, finetune, transfer
from src.attacks.jpeg import JpegFilteredModel
from src.attacks.pruning import prune
from src.attacks.quantization import QuantizedModel, quantize
from src.models.model_io import load_model, save_model
from src.models.network import Model
from src.utils.datasets import SplitDataset
from src.utils.errors import ConfigurationError, DataError, DomainError
from src.utils.key_store import load_json, save_json
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)

AttackedModel = Union[Model, QuantizedModel, JpegFilteredModel]

ATTACK_KINDS = ("prune", "quant_dynamic", "quant_full_uint8", "quant_full_int8", "quant_float16",
                "finetune", "jpeg", "transfer")

# 命令行简写
ALIASES = {
    "dyn": "quant_dynamic",
    "uint8": "quant_full_uint8",
    "int8": "quant_full_int8",
    "f16": "quant_float16",
    "float16": "quant_float16",
}

SHORT_LABELS = {v: k for k, v in ALIASES.items() if k != "float16"}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    rate: Optional[float] = None
    quality: Optional[int] = None
    seed: int = 0
    finetune: Optional[FinetuneConfig] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack: {self.kind}")
        if self.kind == "prune" and (self.rate is None or not 0.0 <= self.rate <= 1.0):
            raise DomainError(f"pruning rate {self.rate} outside [0, 1]")
        if self.kind == "jpeg" and (self.quality is None or not 1 <= self.quality <= 100):
            raise DomainError(f"JPEG quality {self.quality} outside [1, 100]")

    @property
    def label(self) -> str:
        """表格中的场景名"""
        if self.kind == "prune":
            return f"prune:{self.rate:g}"
        if self.kind == "jpeg":
            return f"jpeg:{self.quality}"
        return SHORT_LABELS.get(self.kind, self.kind)

    @property
    def modifies_inputs(self) -> bool:
        return self.kind == "jpeg"


def parse_attack(text: str, seed: int = 0) -> AttackSpec:
    """解析 prune:0.3 | dyn | uint8 | int8 | f16 | finetune | jpeg:55 | transfer"""
    name, _, arg = text.strip().partition(":")
    kind = ALIASES.get(name, name)
    try:
        if kind == "prune":
            return AttackSpec(kind, rate=float(arg), seed=seed)
        if kind == "jpeg":
            return AttackSpec(kind, quality=int(arg) if arg else ATTACK_CONFIG["JPEG_QUALITY"], seed=seed)
    except ValueError as e:
        if isinstance(e, (ConfigurationError, DomainError)):
            raise
        raise ConfigurationError(f"bad attack argument in '{text}'")
    if arg:
        raise ConfigurationError(f"attack {kind} takes no argument: '{text}'")
    return AttackSpec(kind, seed=seed)


def parse_sweep(text: str) -> List[float]:
    """解析扫描网格 prune:a..b:step，端点包含在内"""
    name, _, grid = text.strip().partition(":")
    if name != "prune":
        raise ConfigurationError(f"only pruning sweeps are supported, got '{text}'")
    try:
        bounds, step_text = grid.rsplit(":", 1)
        lo_text, hi_text = bounds.split("..")
        lo, hi, step = float(lo_text), float(hi_text), float(step_text)
    except ValueError:
        raise ConfigurationError(f"bad sweep syntax '{text}', expected prune:a..b:step")
    if step <= 0 or hi < lo:
        raise ConfigurationError(f"bad sweep range '{text}'")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    rates = [round(lo + i * step, 10) for i in range(count)]
    for k in rates:
        if not 0.0 <= k <= 1.0:
            raise DomainError(f"pruning rate {k} outside [0, 1]")
    return rates


def _prune_stream(spec: AttackSpec) -> StreamId:
    # 每个剪枝率使用独立子流，与扫描顺序无关
    return StreamId(spec.seed, "attack.prune", int(round(spec.rate * 10000)))


def apply_attack(model: Model, spec: AttackSpec, split: Optional[SplitDataset] = None) -> AttackedModel:
    """施加攻击，原模型保持不变

    Args:
        model: 水印模型
        spec: 攻击描述
        split: 微调/迁移需要微调集，全量化需要验证集做校准

    Returns:
        被攻击模型；jpeg 返回输入过滤包装
    """
    if not isinstance(model, Model):
        # 量化模型与JPEG包装不能再次施加攻击，需从浮点模型重新开始
        raise ConfigurationError(f"cannot apply {spec.label} to an already attacked {type(model).__name__}; "
                                 "start from the floating-point model")
    kind = spec.kind
    logger.info(f"施加攻击: {spec.label}")
    if kind == "prune":
        return prune(model, spec.rate, _prune_stream(spec).generator())
    if kind == "jpeg":
        return JpegFilteredModel(model.copy(), spec.quality)
    if kind.startswith("quant_"):
        mode = kind[len("quant_"):]
        calibration = None
        if mode.startswith("full_"):
            if split is None or len(split.validation) == 0:
                raise DataError(f"{kind} needs validation images for calibration")
            calibration = split.validation.images[:ATTACK_CONFIG["CALIBRATION_SIZE"]]
        return quantize(model, mode, calibration, overflow=ATTACK_CONFIG["INT8_OVERFLOW"])
    if split is None:
        raise DataError(f"{kind} needs the fine-tune split")
    if kind == "finetune":
        cfg = spec.finetune or FinetuneConfig(ATTACK_CONFIG["FINETUNE_LR"], ATTACK_CONFIG["FINETUNE_EPOCHS"],
                                              ATTACK_CONFIG["FINETUNE_BATCH"])
        return finetune(model, split, cfg, master_seed=spec.seed)
    return transfer(model, split, epochs=ATTACK_CONFIG["TRANSFER_EPOCHS"], master_seed=spec.seed)


def sidecar_path(model_path: str) -> str:
    return model_path + ".attack.json"


def save_attacked(attacked: AttackedModel, path: str, spec: AttackSpec) -> None:
    """保存被攻击模型；量化激活与JPEG过滤记录在旁注文件中"""
    record = {"attack": spec.label, "kind": spec.kind}
    if isinstance(attacked, QuantizedModel):
        save_model(attacked.model, path)
        record["quantization"] = attacked.sidecar()
    elif isinstance(attacked, JpegFilteredModel):
        save_model(attacked.model, path)
        record["jpeg_quality"] = attacked.quality
    else:
        save_model(attacked, path)
    save_json(record, sidecar_path(path))
    logger.info(f"被攻击模型已保存: {path}")


def load_attacked(path: str) -> AttackedModel:
    """读取模型；存在旁注文件时恢复量化或JPEG包装"""
    model = load_model(path)
    side = sidecar_path(path)
    if not os.path.exists(side):
        return model
    record = load_json(side)
    if "quantization" in record:
        return QuantizedModel.restore(model, record["quantization"])
    if "jpeg_quality" in record:
        return JpegFilteredModel(model, int(record["jpeg_quality"]))
    return model
