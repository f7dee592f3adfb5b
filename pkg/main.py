import argparse
import sys
import os
import logging
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

# 添加项目根目录到系统路径，确保能够正确导入模块
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import (BENCH_CONFIG, DATA_CONFIG, DEBUG_MODE, KEY_CONFIG, TRAIN_CONFIG,
                    VERIFY_CONFIG)

# 配置日志
logging.basicConfig(level=logging.DEBUG if DEBUG_MODE else logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

from src.attacks.dispatch import apply_attack, load_attacked, parse_attack, parse_sweep, save_attacked
from src.bench.experiments import (build_embed_config, intertwining_violations, load_split, prepare_experiment,
                                   run_pruning_sweep, run_table, run_usurp)
from src.core.embed import train_model
from src.core.keygen import KeyProfile, default_profile, generate_key
from src.core.trigger import TriggerRole, synth_set
from src.core.verifier import OwnershipVerifier
from src.models.model_io import save_model
from src.rules.decision_rules import RULE_IDS, DecisionParams
from src.utils.errors import ConfigurationError, MixerError
from src.utils.image_dump import dump_triggers
from src.utils.key_store import load_key, save_key, save_report
from src.utils.streams import StreamId

DEFAULT_ATTACKS = "finetune,dyn,uint8,int8,f16,jpeg:55"

EXIT_WATERMARKED = 0
EXIT_NOT_WATERMARKED = 2
EXIT_ERROR = 1


def _out_path(args, name):
    return os.path.join(args.out_dir, name)


def cmd_keygen(args):
    """生成密钥"""
    split = load_split(args.dataset, args.seed, args.data_dir)
    num_classes = split.train.num_classes
    if args.alpha:
        alpha = [float(a) for a in args.alpha.split(",")]
        profile = KeyProfile(num_classes, sum(a > 0 for a in alpha), tuple(alpha), args.seed)
    else:
        profile = default_profile(num_classes, args.m, args.seed, KEY_CONFIG["ALPHA_VALUE"])
    key = generate_key(profile, split.train.image_shape)
    save_key(key, args.out or _out_path(args, "key.json"))
    print(f"密钥指纹: {key.fingerprint}  (m={key.support_size}, C={key.num_classes})")
    return 0


def cmd_embed(args):
    """训练水印模型（--vanilla 时训练不含水印的宿主模型）"""
    split = load_split(args.dataset, args.seed, args.data_dir)
    cfg = build_embed_config(args.arch, args.seed, args.epochs, args.ne_frac, args.resample_per_epoch)
    if not args.vanilla and not args.key:
        raise ConfigurationError("embed needs --key (or --vanilla for the host model)")
    key = None if args.vanilla else load_key(args.key)
    out = args.out or _out_path(args, "host.mxwm" if args.vanilla else "watermarked.mxwm")
    model, log = train_model(split, cfg, key=key, log_path=os.path.splitext(out)[0] + "_log.csv")
    save_model(model, out)
    if args.dump_triggers and key is not None and log.n_e > 0:
        s_e = synth_set(key, split.train, log.n_e, TriggerRole.EMBED, StreamId(args.seed, "trigger.embed"))
        dump_triggers(s_e, args.dump_triggers, limit=32)
    last = log.records[-1] if log.records else None
    if last is not None:
        rec = f"{last.rec_measure:.2f}" if last.rec_measure is not None else "-"
        print(f"训练完成: loss={last.loss:.4f} TA_val={last.ta_val:.2f} Rec_measure={rec} -> {out}")
    return 0


def cmd_verify(args):
    """黑盒所有权验证；退出码 0 表示含水印，2 表示不含"""
    key = load_key(args.key)
    model = load_attacked(args.model)
    params = DecisionParams(rho_p=args.rho_p, rho_n=args.rho_n, p_fp=args.pfp, p_fn=args.pfn, n_d=args.nd)
    verifier = OwnershipVerifier(key, params, rule=args.rule, ledger_path=args.key + ".ledger.json")
    test = load_split(args.dataset, args.seed, args.data_dir).test
    report = verifier.verify(model, test)
    save_report(report, args.report or os.path.splitext(args.model)[0] + ".verify.json")
    print(report.verdict_line())
    return EXIT_WATERMARKED if report.watermarked else EXIT_NOT_WATERMARKED


def cmd_attack(args):
    """对模型施加攻击并保存"""
    model = load_attacked(args.model)
    spec = parse_attack(args.attack, seed=args.seed)
    split = load_split(args.dataset, args.seed, args.data_dir) if spec.kind not in ("prune", "jpeg") else None
    attacked = apply_attack(model, spec, split)
    out = args.out or os.path.splitext(args.model)[0] + f"_{spec.label.replace(':', '')}.mxwm"
    save_attacked(attacked, out, spec)
    print(f"{spec.label} -> {out}")
    return 0


def _experiment(args):
    return prepare_experiment(args.dataset, args.arch, args.seed, data_dir=args.data_dir, epochs=args.epochs,
                              ne_frac=args.ne_frac, resample=args.resample_per_epoch, out_dir=args.out_dir)


def cmd_table(args):
    """宿主/水印/各攻击的结果表"""
    exp = _experiment(args)
    attacks = [parse_attack(a, seed=args.seed) for a in args.attacks.split(",") if a]
    rows = run_table(exp, attacks, n=args.n, workers=args.workers, csv_path=_out_path(args, "table.csv"))
    return 1 if any(row.failed for row in rows) else 0


def cmd_sweep(args):
    """剪枝率扫描"""
    exp = _experiment(args)
    rates = parse_sweep(args.sweep)
    points = run_pruning_sweep(exp, rates, n=args.n, workers=args.workers,
                               csv_path=_out_path(args, "sweep.csv"), plot_path=_out_path(args, "sweep.png"))
    baseline = next((p.ta for p in points if p.k == 0.0), None)
    if baseline is not None:
        violations = intertwining_violations(points, baseline)
        if violations:
            logger.warning(f"TA 保持但水印丢失的剪枝率: {violations}")
    return 0


def cmd_usurp(args):
    """伪造者成功率"""
    exp = _experiment(args)
    tau = DecisionParams(rho_p=VERIFY_CONFIG["RHO_P"], rho_n=VERIFY_CONFIG["RHO_N"]).resolved().tau
    report = run_usurp(exp, args.keys, args.per_key, tau, report_path=_out_path(args, "usurp.json"))
    print(f"USR = {report.rate:.2f}% ± {report.stderr:.2f} (95% [{report.ci_low:.2f}, {report.ci_high:.2f}]), "
          f"ρ>τ: {report.exceed_count}/{report.n_keys}")
    return 0


def _add_common(p):
    p.add_argument('--seed', type=int, default=KEY_CONFIG["MASTER_SEED"], help='主种子')
    p.add_argument('--data-dir', default=DATA_CONFIG["DATA_DIR"], help='数据目录')
    p.add_argument('--dataset', default=DATA_CONFIG["DATASET"], choices=['blobs', 'mnist', 'cifar10'])
    p.add_argument('--out-dir', default=BENCH_CONFIG["OUT_DIR"], help='输出目录')


def _add_training(p):
    p.add_argument('--arch', default=TRAIN_CONFIG["ARCH"], help='mnist_cnn / cifar10_cnn / mlp:64,32')
    p.add_argument('--epochs', type=int, default=None, help='训练轮数')
    p.add_argument('--ne-frac', type=float, default=None, help='S_e 占训练集比例')
    p.add_argument('--resample-per-epoch', action='store_true', help='每轮重新生成 S_e')


def build_parser():
    parser = argparse.ArgumentParser(description='Mixer: 基于mixup触发样本的DNN水印工具')
    parser.add_argument('--web', action='store_true', help='启动Web验证界面')
    parser.add_argument('--port', type=int, help='指定Web服务端口')
    parser.add_argument('--dataset', dest='web_dataset', default=None, help='Web界面使用的数据集')
    parser.add_argument('--data-dir', dest='web_data_dir', default=None, help='Web界面使用的数据目录')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('keygen', help='生成密钥')
    _add_common(p)
    p.add_argument('--m', type=int, default=KEY_CONFIG["SUPPORT_SIZE"], help='支撑集大小')
    p.add_argument('--alpha', default=None, help='完整的α向量，逗号分隔')
    p.add_argument('--out', default=None, help='密钥文件路径')
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser('embed', help='训练水印模型')
    _add_common(p)
    _add_training(p)
    p.add_argument('--key', help='密钥文件')
    p.add_argument('--vanilla', action='store_true', help='训练不含水印的宿主模型')
    p.add_argument('--out', default=None, help='模型文件路径')
    p.add_argument('--dump-triggers', default=None, help='把 S_e 的前32张导出为PNG')
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser('verify', help='所有权验证')
    _add_common(p)
    p.add_argument('--model', required=True)
    p.add_argument('--key', required=True)
    p.add_argument('--pfp', type=float, default=VERIFY_CONFIG["P_FP"])
    p.add_argument('--pfn', type=float, default=VERIFY_CONFIG["P_FN"])
    p.add_argument('--rho-p', type=float, default=VERIFY_CONFIG["RHO_P"])
    p.add_argument('--rho-n', type=float, default=VERIFY_CONFIG["RHO_N"])
    p.add_argument('--nd', type=int, default=None, help='查询数（缺省由Chernoff界确定）')
    p.add_argument('--rule', choices=list(RULE_IDS), default=VERIFY_CONFIG["RULE"])
    p.add_argument('--report', default=None, help='验证报告JSON路径')
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('attack', help='施加攻击')
    _add_common(p)
    p.add_argument('--model', required=True)
    p.add_argument('--attack', required=True, help='prune:0.3|dyn|uint8|int8|f16|finetune|jpeg:55|transfer')
    p.add_argument('--out', default=None, help='被攻击模型路径')
    p.set_defaults(func=cmd_attack)

    for name, func, text in (('table', cmd_table, '结果表'), ('sweep', cmd_sweep, '剪枝扫描'),
                             ('usurp', cmd_usurp, '伪造者成功率')):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_training(p)
        p.add_argument('--n', type=int, default=BENCH_CONFIG["REC_SAMPLES"], help='每个Rec指标的触发样本数')
        p.add_argument('--workers', type=int, default=BENCH_CONFIG["WORKERS"])
        p.set_defaults(func=func)
    sub.choices['table'].add_argument('--attacks', default=DEFAULT_ATTACKS)
    sub.choices['sweep'].add_argument('--sweep', default=BENCH_CONFIG["SWEEP"])
    sub.choices['usurp'].add_argument('--keys', type=int, default=BENCH_CONFIG["USR_KEYS"])
    sub.choices['usurp'].add_argument('--per-key', type=int, default=BENCH_CONFIG["USR_PER_KEY"])
    return parser


def main(argv=None):
    """程序入口函数"""

    parser = build_parser()
    args = parser.parse_args(argv)

    # 检查是否启用Web界面
    if args.web:
        from src.web.app import launch_app
        launch_app(port=args.port, dataset=args.web_dataset, data_dir=args.web_data_dir)
        return 0

    if not args.command:
        parser.print_help()
        print("\n示例: python main.py keygen && python main.py embed --key runs/key.json")
        return 0

    try:
        return args.func(args)
    except (MixerError, OSError) as e:
        logger.error(f"{args.command} 失败: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
