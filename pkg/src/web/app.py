import sys
import os
import gradio as gr
import traceback
import logging

# 添加项目根目录到系统路径
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from config import BENCH_CONFIG, DATA_CONFIG, VERIFY_CONFIG, WEB_CONFIG
from src.attacks.dispatch import load_attacked
from src.bench.experiments import load_split
from src.core.verifier import OwnershipVerifier
from src.rules.decision_rules import DECISION_RULES, RULE_IDS, DecisionParams
from src.utils.key_store import load_key

# 配置日志
logger = logging.getLogger(__name__)


def _file_path(upload):
    """gradio 不同版本的上传对象可能是路径字符串或带 name 属性的临时文件"""
    if upload is None:
        return None
    return upload if isinstance(upload, str) else upload.name


def create_app(dataset=None, data_dir=None):
    """创建Gradio Web应用"""

    dataset = dataset or DATA_CONFIG["DATASET"]
    split_cache = {}
    ledger_path = os.path.join(BENCH_CONFIG["OUT_DIR"], "web_ledger.json")

    def test_pool(seed):
        # 测试集只依赖数据集与主种子，按种子缓存
        if seed not in split_cache:
            split_cache[seed] = load_split(dataset, seed, data_dir).test
        return split_cache[seed]

    def verify_upload(model_file, key_file, p_fp, p_fn, n_d, rule):
        """执行所有权验证

        Args:
            model_file: 上传的 .mxwm 模型
            key_file: 上传的密钥 JSON
            p_fp: 误报率上限
            p_fn: 漏报率上限
            n_d: 查询数，0 表示按 Chernoff 界自动确定
            rule: 判决规则

        Returns:
            判决说明和完整报告
        """
        model_path, key_path = _file_path(model_file), _file_path(key_file)
        if not model_path or not key_path:
            return "请先上传模型文件和密钥文件", {}
        try:
            key = load_key(key_path)
            model = load_attacked(model_path)
            params = DecisionParams(rho_p=VERIFY_CONFIG["RHO_P"], rho_n=VERIFY_CONFIG["RHO_N"],
                                    p_fp=float(p_fp), p_fn=float(p_fn), n_d=int(n_d) if n_d else None)
            verifier = OwnershipVerifier(key, params, rule=rule, ledger_path=ledger_path)
            report = verifier.verify(model, test_pool(key.master_seed))

            level_icon = "✅" if report.watermarked else "❌"
            verdict = "模型含有该密钥的水印" if report.watermarked else "未检测到该密钥的水印"
            conclusion = f"""## 验证结论 {level_icon}

**{verdict}**

- ρ = {report.rho:.4f}（命中 {report.matches}/{report.n_d}）
- 阈值 τ = {report.tau:.4f}
- 误报上界 {report.fp_bound:.3g}，漏报上界 {report.fn_bound:.3g}
- 密钥指纹 `{report.key_fingerprint}`，随机子流 `{report.stream_id}`
"""
            return conclusion, report.to_dict()
        except Exception as e:
            error_tb = traceback.format_exc()
            logger.error(f"验证异常: {str(e)}\n{error_tb}")
            return f"验证出错: {str(e)}", {}

    rule_help = "\n".join(f"- **{r['id']}** {r['name']}：{r['description']}" for r in DECISION_RULES)

    # 设计UI界面
    with gr.Blocks(title=WEB_CONFIG["TITLE"], theme=WEB_CONFIG["THEME"]) as app:
        gr.Markdown(f"""
        # {WEB_CONFIG["TITLE"]}

        {WEB_CONFIG["DESCRIPTION"]}（数据集: {dataset}）
        """)

        with gr.Row():
            with gr.Column():
                model_input = gr.File(label="模型文件 (.mxwm)")
                key_input = gr.File(label="密钥文件 (.json)")
                p_fp_input = gr.Number(label="误报率上限 P_fp", value=VERIFY_CONFIG["P_FP"])
                p_fn_input = gr.Number(label="漏报率上限 P_fn", value=VERIFY_CONFIG["P_FN"])
                n_d_input = gr.Number(label="查询数 n_d（0为自动）", value=0, precision=0)
                rule_input = gr.Dropdown(choices=list(RULE_IDS), value=VERIFY_CONFIG["RULE"], label="判决规则")
                verify_button = gr.Button("开始验证", variant="primary")
                gr.Markdown(rule_help)

            with gr.Column():
                conclusion_output = gr.Markdown(label="验证结论")
                report_output = gr.JSON(label="验证报告")

        # 设置点击事件
        verify_button.click(
            fn=verify_upload,
            inputs=[model_input, key_input, p_fp_input, p_fn_input, n_d_input, rule_input],
            outputs=[conclusion_output, report_output]
        )

    return app


def launch_app(port=None, dataset=None, data_dir=None):
    """启动Web应用

    Args:
        port: 服务端口，如果为None则使用配置中的端口
        dataset: 测试集所属数据集
        data_dir: 数据目录
    """
    app = create_app(dataset, data_dir)
    server_port = port if port is not None else WEB_CONFIG["PORT"]

    # 端口被占用时依次尝试其他端口
    try:
        app.launch(server_port=server_port, server_name="0.0.0.0")
    except OSError as e:
        if "address already in use" in str(e).lower():
            logger.warning(f"端口 {server_port} 已被占用，尝试使用其他端口...")
            for alt_port in range(7865, 7880):
                if alt_port == server_port:
                    continue
                try:
                    app.launch(server_port=alt_port)
                    break
                except OSError:
                    continue
            else:
                logger.error("无法找到可用端口，请手动指定，例如: python main.py --web --port 8000")
        else:
            raise


if __name__ == "__main__":
    launch_app()
