import logging
from dataclasses import dataclass
from typing import Optional

from src.models.architectures import DEFAULT_RECIPES, parse_architecture
from src.models.network import Model
from src.models.optim import OptimizerConfig
from src.models.training import fit, one_hot
from src.utils.datasets import SplitDataset
from src.utils.errors import ConfigurationError, DataError
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)

FINETUNE_STREAM = "attack.finetune"


@dataclass(frozen=True)
class FinetuneConfig:
    """微调攻击配置，缺省 lr=1e-5、30轮、批大小64；algorithm 为空时沿用架构自己的优化器"""

    learning_rate: float = 1e-5
    epochs: int = 30
    batch_size: int = 64
    algorithm: Optional[str] = None


def _recipe(model: Model) -> dict:
    try:
        base, _ = parse_architecture(model.name)
    except ConfigurationError:
        base = "mlp"
    return DEFAULT_RECIPES[base]


def _retrain(model: Model, split: SplitDataset, opt: OptimizerConfig, master_seed: int, desc: str) -> Model:
    data = split.finetune
    if len(data) == 0:
        raise DataError("fine-tune split is empty")
    model.set_dropout_generator(StreamId(master_seed, FINETUNE_STREAM, 1).generator())
    fit(model, data.images, one_hot(data.labels, data.num_classes), opt,
        StreamId(master_seed, FINETUNE_STREAM, 0).generator(), desc=desc)
    return model


def finetune(model: Model, split: SplitDataset, cfg: Optional[FinetuneConfig] = None,
             master_seed: int = 0) -> Model:
    """在10%微调集上用自然标签以低学习率继续训练（不含任何触发样本）

    Args:
        model: 源模型（不会被修改）
        split: 数据划分
        cfg: 微调配置
        master_seed: 主种子

    Returns:
        微调后的新模型
    """
    cfg = cfg or FinetuneConfig()
    recipe = _recipe(model)
    opt = OptimizerConfig(algorithm=cfg.algorithm or recipe["algorithm"], learning_rate=cfg.learning_rate,
                          momentum=recipe.get("momentum", 0.9), batch_size=cfg.batch_size, epochs=cfg.epochs)
    logger.info(f"微调攻击: {opt.algorithm} lr={opt.learning_rate} epochs={opt.epochs} batch={opt.batch_size}")
    return _retrain(model.copy(), split, opt, master_seed, "finetune")


def transfer(model: Model, split: SplitDataset, epochs: int = 10, master_seed: int = 0) -> Model:
    """迁移学习式攻击：重置全连接分类头，再以架构自身的学习率在微调集上整体重训"""
    recipe = _recipe(model)
    opt = OptimizerConfig(algorithm=recipe["algorithm"], learning_rate=recipe["learning_rate"],
                          momentum=recipe.get("momentum", 0.9), batch_size=recipe["batch_size"], epochs=epochs)
    tuned = model.copy()
    tuned.reset_head(StreamId(master_seed, FINETUNE_STREAM, 2).generator())
    logger.info(f"迁移攻击: 重置分类头后重训 {epochs} 轮")
    return _retrain(tuned, split, opt, master_seed, "transfer")
