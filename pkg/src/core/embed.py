import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.core.keygen import SecretKey
from src.core.trigger import TriggerRole, TriggerSet, empty_set, synth_set
from src.models.architectures import build_architecture
from src.models.network import Model
from src.models.optim import OptimizerConfig
from src.models.training import fit, one_hot
from src.utils.datasets import Dataset, SplitDataset
from src.utils.errors import ConfigurationError, ProtocolError
from src.utils.key_store import write_csv
from src.utils.streams import StreamId

# 配置日志
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedConfig:
    """水印嵌入配置

    n_e 直接给定，或由 ne_frac（训练集比例）推出。
    """

    architecture: str
    optimizer: OptimizerConfig
    master_seed: int
    n_e: Optional[int] = None
    ne_frac: float = 0.02
    resample_per_epoch: bool = False
    measure_size: int = 200

    def trigger_count(self, train_size: int) -> int:
        n_e = self.n_e if self.n_e is not None else int(round(self.ne_frac * train_size))
        if n_e < 0 or n_e > train_size:
            raise ConfigurationError(f"n_e={n_e} outside [0, {train_size}]")
        return n_e


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ta_val: float
    rec_measure: Optional[float]


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    n_e: int = 0

    def rows(self):
        return [(r.epoch, r.loss, r.ta_val, r.rec_measure) for r in self.records]


class InjectedStream:
    """自然样本（独热标签）与触发样本（标签 ỹ=μ）合并后的训练流"""

    def __init__(self, train: Dataset, s_e: TriggerSet):
        if s_e.role != TriggerRole.EMBED:
            raise ProtocolError(f"inject needs an embed-role set, got {s_e.role.value}")
        self.train = train
        self.s_e = s_e
        natural_targets = one_hot(train.labels, train.num_classes)
        if len(s_e):
            self.images = np.concatenate([train.images, s_e.images().astype(np.float32)])
            self.targets = np.concatenate([natural_targets, s_e.soft_labels()])
        else:
            self.images = train.images
            self.targets = natural_targets

    def __len__(self) -> int:
        return len(self.targets)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.images, self.targets

    def epoch(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """打乱后的一轮数据，每个触发样本恰好出现一次"""
        order = rng.permutation(len(self))
        return self.images[order], self.targets[order]


def inject(train: Dataset, s_e: TriggerSet) -> InjectedStream:
    """把 S_e 注入训练集"""
    return InjectedStream(train, s_e)


def _accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return 100.0 * float(np.mean(model.predict(dataset.images).argmax(axis=1) == dataset.labels))


def _trigger_hits(model: Model, triggers: TriggerSet, target: int) -> float:
    return 100.0 * float(np.mean(model.predict(triggers.images()).argmax(axis=1) == target))


def train_model(split: SplitDataset, cfg: EmbedConfig, key: Optional[SecretKey] = None,
                log_path: Optional[str] = None) -> Tuple[Model, TrainingLog]:
    """训练模型；给定密钥时注入 S_e，否则为对照用的宿主模型

    Args:
        split: 划分后的数据集
        cfg: 嵌入配置
        key: 水印密钥（None 表示不嵌入）
        log_path: 训练日志CSV路径

    Returns:
        (模型, 训练日志)
    """
    train = split.train
    model = build_architecture(cfg.architecture, train.image_shape, train.num_classes,
                               rng=StreamId(cfg.master_seed, "train.init").generator())
    model.set_dropout_generator(StreamId(cfg.master_seed, "train.dropout").generator())

    n_e = cfg.trigger_count(len(train)) if key is not None else 0
    embed_stream = StreamId(cfg.master_seed, "trigger.embed")
    if key is not None and n_e > 0:
        s_e = synth_set(key, train, n_e, TriggerRole.EMBED, embed_stream)
    elif key is not None:
        s_e = empty_set(key)
    else:
        s_e = None
    stream = inject(train, s_e) if s_e is not None else None

    measure = None
    if key is not None and cfg.measure_size > 0 and len(split.validation):
        measure = synth_set(key, split.validation, cfg.measure_size, TriggerRole.MEASURE,
                            StreamId(cfg.master_seed, "trigger.measure.validation"))

    log = TrainingLog(n_e=n_e)

    def on_epoch(epoch: int, loss: float) -> None:
        ta = _accuracy(model, split.validation)
        rec = _trigger_hits(model, measure, key.target_class) if measure is not None else None
        log.records.append(EpochRecord(epoch + 1, loss, ta, rec))
        rec_text = f"{rec:.2f}" if rec is not None else "-"
        logger.info(f"第{epoch + 1}轮: loss={loss:.4f} TA_val={ta:.2f} Rec_measure={rec_text}")

    def resampled(epoch: int):
        fresh = synth_set(key, train, n_e, TriggerRole.EMBED, embed_stream.advance(epoch))
        return inject(train, fresh).arrays()

    if stream is not None:
        images, targets = stream.arrays()
    else:
        images, targets = train.images, one_hot(train.labels, train.num_classes)
    batch_source = resampled if (key is not None and n_e > 0 and cfg.resample_per_epoch) else None

    logger.info(f"开始训练 {model.name}: 训练样本 {len(train)}, n_e={n_e}, 轮数 {cfg.optimizer.epochs}")
    fit(model, images, targets, cfg.optimizer, StreamId(cfg.master_seed, "train.shuffle").generator(),
        epoch_callback=on_epoch, batch_source=batch_source, desc="watermark" if key is not None else "host")

    if log_path:
        write_csv(log_path, ["epoch", "loss", "TA_val", "Rec_measure"], log.rows())
    return model, log


def train_watermarked(split: SplitDataset, key: SecretKey, cfg: EmbedConfig,
                      log_path: Optional[str] = None) -> Model:
    """嵌入水印：在注入了 S_e 的训练集上用软标签交叉熵训练"""
    model, _ = train_model(split, cfg, key=key, log_path=log_path)
    return model


def train_vanilla(split: SplitDataset, cfg: EmbedConfig, log_path: Optional[str] = None) -> Model:
    """宿主模型（不注入触发样本）"""
    model, _ = train_model(split, cfg, key=None, log_path=log_path)
    return model

