"""实验编排：准备宿主/水印模型，生成攻击结果表与剪枝曲线"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from rich.console import Console
from rich.table import Table

from config import BENCH_CONFIG, DATA_CONFIG, KEY_CONFIG, TRAIN_CONFIG
from src.attacks.dispatch import AttackSpec, apply_attack
from src.bench.metrics import MetricsRow, UsurperModel, UsurperReport, test_accuracy, usurper_success_rate
from src.core.embed import EmbedConfig, train_vanilla, train_watermarked
from src.core.keygen import SecretKey, default_profile, generate_key
from src.core.trigger import TriggerRole, TriggerSet, synth_set
from src.core.verifier import BlackBox, score_triggers
from src.models.architectures import default_optimizer
from src.models.model_io import load_model, save_model
from src.models.network import Model
from src.utils.datasets import SplitDataset, load_dataset
from src.utils.key_store import load_json, load_key, save_key, save_report, write_csv
from src.utils.streams import StreamId

logger = logging.getLogger(__name__)
console = Console()

TABLE_HEADER = ["scenario", "TA", "Rec_tr", "Rec_ts"]
SWEEP_HEADER = ["k", "TA", "Rec_tr", "Rec_ts"]
METRIC_NAMES = ("TA", "Rec_tr", "Rec_ts")


@dataclass
class Experiment:
    dataset: str
    split: SplitDataset
    key: SecretKey
    host: Model
    watermarked: Model
    config: EmbedConfig
    master_seed: int


@dataclass
class SweepPoint:
    k: float
    ta: float
    rec_tr: float
    rec_ts: float

    def cells(self) -> Tuple:
        return self.k, self.ta, self.rec_tr, self.rec_ts


def build_embed_config(arch: str, seed: int, epochs: Optional[int] = None, ne_frac: Optional[float] = None,
                       resample: bool = False) -> EmbedConfig:
    return EmbedConfig(
        architecture=arch,
        optimizer=default_optimizer(arch, epochs if epochs is not None else TRAIN_CONFIG["EPOCHS"]),
        master_seed=seed,
        ne_frac=ne_frac if ne_frac is not None else TRAIN_CONFIG["NE_FRAC"],
        resample_per_epoch=resample,
        measure_size=TRAIN_CONFIG["MEASURE_SIZE"],
    )


def load_split(dataset: str, seed: int, data_dir: Optional[str] = None, full: Optional[bool] = None) -> SplitDataset:
    return load_dataset(dataset, data_dir or DATA_CONFIG["DATA_DIR"], seed,
                        full=DATA_CONFIG["FULL_DATA"] if full is None else full,
                        mnist_subset=DATA_CONFIG["MNIST_SUBSET"],
                        blobs_per_class=DATA_CONFIG["BLOBS_PER_CLASS"],
                        blobs_test_per_class=DATA_CONFIG["BLOBS_TEST_PER_CLASS"],
                        blobs_shape=DATA_CONFIG["BLOBS_SHAPE"],
                        blobs_classes=DATA_CONFIG["BLOBS_CLASSES"])


def _artifacts(out_dir: str) -> Dict[str, str]:
    return {
        "key": os.path.join(out_dir, "key.json"),
        "host": os.path.join(out_dir, "host.mxwm"),
        "watermarked": os.path.join(out_dir, "watermarked.mxwm"),
        "host_log": os.path.join(out_dir, "host_log.csv"),
        "watermarked_log": os.path.join(out_dir, "watermarked_log.csv"),
    }


def prepare_experiment(dataset: str, arch: str, seed: int, data_dir: Optional[str] = None,
                       full: Optional[bool] = None, epochs: Optional[int] = None, ne_frac: Optional[float] = None,
                       resample: bool = False, out_dir: Optional[str] = None, reuse: bool = True) -> Experiment:
    """准备实验：数据划分、密钥、宿主模型与水印模型

    out_dir 中已有同一主种子的密钥和两个模型时直接复用。

    Args:
        dataset: blobs / mnist / cifar10
        arch: 模型结构
        seed: 主种子
        data_dir: 数据目录
        full: 是否使用完整MNIST
        epochs: 训练轮数
        ne_frac: S_e 比例
        resample: 每轮重新生成 S_e
        out_dir: 产物目录
        reuse: 是否复用已有产物

    Returns:
        Experiment
    """
    split = load_split(dataset, seed, data_dir, full)
    cfg = build_embed_config(arch, seed, epochs, ne_frac, resample)
    paths = _artifacts(out_dir) if out_dir else None

    if paths and reuse and all(os.path.exists(paths[k]) for k in ("key", "host", "watermarked")):
        key = load_key(paths["key"])
        if key.master_seed == seed:
            logger.info(f"复用 {out_dir} 中已训练的模型")
            return Experiment(dataset, split, key, load_model(paths["host"]), load_model(paths["watermarked"]),
                              cfg, seed)
        logger.info("已有产物的主种子不同，重新训练")

    profile = default_profile(split.train.num_classes, KEY_CONFIG["SUPPORT_SIZE"], seed, KEY_CONFIG["ALPHA_VALUE"])
    key = generate_key(profile, split.train.image_shape)
    host = train_vanilla(split, cfg, log_path=paths["host_log"] if paths else None)
    watermarked = train_watermarked(split, key, cfg, log_path=paths["watermarked_log"] if paths else None)
    if paths:
        save_key(key, paths["key"])
        save_model(host, paths["host"])
        save_model(watermarked, paths["watermarked"])
    return Experiment(dataset, split, key, host, watermarked, cfg, seed)


def measure_sets(exp: Experiment, n: int) -> Tuple[TriggerSet, TriggerSet]:
    """Rec_tr 与 Rec_ts 所用的 measure 触发集（所有行共用，行之间可直接比较）"""
    tr = synth_set(exp.key, exp.split.train, n, TriggerRole.MEASURE,
                   StreamId(exp.master_seed, "trigger.measure.train"))
    ts = synth_set(exp.key, exp.split.test, n, TriggerRole.MEASURE,
                   StreamId(exp.master_seed, "trigger.measure.test"))
    return tr, ts


def evaluate(scenario: str, model: BlackBox, exp: Experiment, sets: Tuple[TriggerSet, TriggerSet],
             with_rec_tr: bool = True) -> MetricsRow:
    tr, ts = sets
    rec_tr = 100.0 * score_triggers(model, tr, exp.key)[0] if with_rec_tr else None
    rec_ts = 100.0 * score_triggers(model, ts, exp.key)[0]
    return MetricsRow(scenario, test_accuracy(model, exp.split.test), rec_tr, rec_ts)


def _attack_row(exp: Experiment, spec: AttackSpec, sets) -> MetricsRow:
    try:
        attacked = apply_attack(exp.watermarked, spec, exp.split)
        return evaluate(spec.label, attacked, exp, sets)
    except Exception as e:
        logger.error(f"攻击 {spec.label} 失败: {e}")
        return MetricsRow(spec.label, status=f"failed: {e}")


def _run_ordered(tasks: Sequence[Callable], workers: int) -> List:
    # 结果按提交顺序收集，与完成顺序无关
    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="mixer-bench") as pool:
        futures = [pool.submit(task) for task in tasks]
        return [future.result() for future in futures]


def load_reference(dataset: str, path: Optional[str] = None) -> Dict:
    path = path or BENCH_CONFIG["REFERENCE_FILE"]
    if not os.path.exists(path):
        return {}
    data = load_json(path)
    rows = data.get("datasets", {}).get(dataset, {})
    default = data.get("default_tolerance", {})
    return {scenario: {"values": {m: v.get(m) for m in METRIC_NAMES},
                       "tolerance": {**default, **v.get("tolerance", {})}}
            for scenario, v in rows.items()}


def compare_with_reference(rows: Sequence[MetricsRow], reference: Dict) -> Dict[str, Dict[str, Optional[bool]]]:
    """逐格比较实测值与参考值；无参考值的格子为 None"""
    result: Dict[str, Dict[str, Optional[bool]]] = {}
    for row in rows:
        ref = reference.get(row.scenario)
        marks: Dict[str, Optional[bool]] = {}
        for metric, measured in zip(METRIC_NAMES, row.cells()[1:]):
            expected = ref["values"].get(metric) if ref else None
            if expected is None or measured is None:
                marks[metric] = None
            else:
                marks[metric] = abs(measured - expected) <= ref["tolerance"].get(metric, 0.0)
        result[row.scenario] = marks
    return result


def _cell(value: Optional[float], expected: Optional[float], mark: Optional[bool]) -> str:
    text = "-" if value is None else f"{value:.2f}"
    if mark is None:
        return text
    return f"{text} ({expected:g}) {'✅' if mark else '❌'}"


def render_table(rows: Sequence[MetricsRow], reference: Optional[Dict] = None, title: str = "Mixer") -> Table:
    reference = reference or {}
    marks = compare_with_reference(rows, reference)
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("scenario")
    for metric in METRIC_NAMES:
        table.add_column(metric, justify="right")
    for row in rows:
        if row.failed:
            table.add_row(row.scenario, f"[red]{row.status}[/red]", "", "")
            continue
        expected = reference.get(row.scenario, {}).get("values", {})
        table.add_row(row.scenario, *[_cell(v, expected.get(m), marks[row.scenario][m])
                                      for m, v in zip(METRIC_NAMES, row.cells()[1:])])
    return table


def _csv_rows(rows: Sequence[MetricsRow]) -> List[Tuple]:
    return [row.cells() if not row.failed else (f"{row.scenario} [{row.status}]", None, None, None) for row in rows]


def run_table(exp: Experiment, attacks: Sequence[AttackSpec], n: int = 1000, workers: int = 1,
              csv_path: Optional[str] = None, show: bool = True) -> List[MetricsRow]:
    """宿主、水印与各攻击场景的 TA / Rec_tr / Rec_ts 表

    Args:
        exp: 实验
        attacks: 攻击列表（按此顺序输出）
        n: 每个 Rec 指标的触发样本数
        workers: 并行线程数
        csv_path: CSV 输出路径
        show: 是否在终端打印表格

    Returns:
        MetricsRow 列表
    """
    sets = measure_sets(exp, n)
    tasks: List[Callable] = [
        lambda: evaluate("host", exp.host, exp, sets, with_rec_tr=False),
        lambda: evaluate("watermarked", exp.watermarked, exp, sets),
    ]
    tasks += [lambda spec=spec: _attack_row(exp, spec, sets) for spec in attacks]
    rows = _run_ordered(tasks, workers)
    if csv_path:
        write_csv(csv_path, TABLE_HEADER, _csv_rows(rows))
        logger.info(f"结果表已写入 {csv_path}")
    if show:
        console.print(render_table(rows, load_reference(exp.dataset), title=f"Mixer / {exp.dataset}"))
    return rows


def run_pruning_sweep(exp: Experiment, rates: Sequence[float], n: int = 1000, workers: int = 1,
                      csv_path: Optional[str] = None, plot_path: Optional[str] = None) -> List[SweepPoint]:
    """剪枝率扫描：每个剪枝率在独立的模型副本和独立子流上评估"""
    sets = measure_sets(exp, n)

    def point(k: float) -> SweepPoint:
        attacked = apply_attack(exp.watermarked, AttackSpec("prune", rate=k, seed=exp.master_seed))
        row = evaluate(f"prune:{k:g}", attacked, exp, sets)
        logger.info(f"k={k:.2f}: TA={row.ta:.2f} Rec_tr={row.rec_tr:.2f} Rec_ts={row.rec_ts:.2f}")
        return SweepPoint(k, row.ta, row.rec_tr, row.rec_ts)

    points = _run_ordered([lambda k=k: point(k) for k in rates], workers)
    if csv_path:
        write_csv(csv_path, SWEEP_HEADER, [p.cells() for p in points])
    if plot_path:
        plot_sweep(points, plot_path, title=f"{exp.dataset}: accuracy vs pruning rate")
    return points


def plot_sweep(points: Sequence[SweepPoint], path: str, title: str = "accuracy vs pruning rate") -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    ks = [p.k for p in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, [p.ta for p in points], marker="o", label="TA")
    ax.plot(ks, [p.rec_tr for p in points], marker="s", label="Rec_tr")
    ax.plot(ks, [p.rec_ts for p in points], marker="^", label="Rec_ts")
    ax.set_xlabel("pruning rate k")
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"剪枝曲线已保存: {path}")


def intertwining_violations(points: Sequence[SweepPoint], baseline_ta: float, ta_ratio: float = 0.9,
                            min_rec: float = 80.0) -> List[float]:
    """TA 仍保持在基线的 ta_ratio 以上、但 Rec_ts 低于 min_rec 的剪枝率"""
    return [p.k for p in points if p.ta >= ta_ratio * baseline_ta and p.rec_ts < min_rec]


def run_usurp(exp: Experiment, n_keys: int, n_per_key: int, tau: float,
              report_path: Optional[str] = None) -> UsurperReport:
    usurper = UsurperModel.from_key(exp.key, n_keys, n_per_key, seed=exp.master_seed)
    report = usurper_success_rate(exp.watermarked, usurper, exp.split.test, tau=tau)
    if report_path:
        save_report(report, report_path)
    return report
