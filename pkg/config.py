import os
from dotenv import load_dotenv

# 加载环境变量
load_dotenv()

# 调试模式
DEBUG_MODE = os.getenv("DEBUG_MODE", "false").lower() == "true"

# 数据集配置
DATA_CONFIG = {
    "DATA_DIR": os.getenv("MIXER_DATA_DIR", "./data"),
    # blobs / mnist / cifar10，默认使用合成数据以便在CI中运行
    "DATASET": os.getenv("MIXER_DATASET", "blobs"),
    "FULL_DATA": os.getenv("MIXER_FULL_DATA", "false").lower() == "true",
    "MNIST_SUBSET": 8000,  # 桌面规模的MNIST子集大小
    "BLOBS_PER_CLASS": 500,
    "BLOBS_TEST_PER_CLASS": 100,
    "BLOBS_SHAPE": (28, 28, 1),
    "BLOBS_CLASSES": 10,
}

# 训练配置
TRAIN_CONFIG = {
    "ARCH": os.getenv("MIXER_ARCH", "mnist_cnn"),
    "EPOCHS": int(os.getenv("MIXER_EPOCHS", "15")),  # 完整配方为100/200轮，这里是桌面规模预算
    "BATCH_SIZE": 64,
    "NE_FRAC": 0.02,  # S_e 占训练集的比例
    "RESAMPLE_PER_EPOCH": False,
    "MEASURE_SIZE": 200,  # 训练日志中每轮测量Rec所用的触发样本数
}

# 密钥配置
KEY_CONFIG = {
    "SUPPORT_SIZE": 2,
    "ALPHA_VALUE": 1.0,
    "MASTER_SEED": int(os.getenv("MIXER_SEED", "2024")),
}

# 验证配置
VERIFY_CONFIG = {
    "RHO_N": 0.5,
    "RHO_P": 0.8,
    "P_FP": 0.05,
    "P_FN": 0.05,
    "RULE": "plain",
}

# 攻击配置
ATTACK_CONFIG = {
    "CALIBRATION_SIZE": 100,
    "FINETUNE_LR": 1e-5,
    "FINETUNE_EPOCHS": 30,
    "FINETUNE_BATCH": 64,
    "TRANSFER_EPOCHS": 10,
    "JPEG_QUALITY": 55,
    "INT8_OVERFLOW": os.getenv("MIXER_INT8_OVERFLOW", "saturate"),  # saturate / wrap
}

# 实验配置
BENCH_CONFIG = {
    "REC_SAMPLES": 1000,
    "USR_KEYS": 1000,
    "USR_PER_KEY": 100,
    "SWEEP": "prune:0.0..0.9:0.05",
    "WORKERS": int(os.getenv("MIXER_WORKERS", "4")),
    "OUT_DIR": os.getenv("MIXER_OUT_DIR", "./runs"),
    "REFERENCE_FILE": os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "reference_results.json"),
}

# Web应用配置
WEB_CONFIG = {
    "TITLE": "Mixer 模型水印验证",
    "DESCRIPTION": "基于mixup触发样本的黑盒所有权验证",
    "THEME": "soft",
    "PORT": int(os.getenv("MIXER_WEB_PORT", "7860")),
}
