"""密钥与报告的持久化（JSON，带版本号）"""

import base64
import csv
import json
import logging
import os
import stat
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from src.core.keygen import SecretKey
from src.utils.errors import FormatError

logger = logging.getLogger(__name__)

KEY_FORMAT_VERSION = 1


def _encode_overlay(overlay: np.ndarray) -> str:
    quantized = np.clip(np.rint(overlay * 255.0), 0, 255).astype(np.uint8)
    return base64.b64encode(quantized.tobytes()).decode("ascii")


def key_to_dict(key: SecretKey) -> Dict[str, Any]:
    return {
        "version": KEY_FORMAT_VERSION,
        "C": key.num_classes,
        "m": key.support_size,
        "alpha": list(key.alpha),
        "lambda": [float(v) for v in key.lam],
        "mu": [float(v) for v in key.mu],
        "overlay_shape": list(key.overlay.shape),
        "overlay": _encode_overlay(key.overlay),
        "master_seed": key.master_seed,
        "created": key.created,
        "fingerprint": key.fingerprint,
    }


def key_from_dict(data: Dict[str, Any]) -> SecretKey:
    try:
        if data["version"] != KEY_FORMAT_VERSION:
            raise FormatError(f"unsupported key version {data['version']}")
        shape = tuple(int(d) for d in data["overlay_shape"])
        raw = base64.b64decode(data["overlay"].encode("ascii"), validate=True)
        if len(raw) != int(np.prod(shape)):
            raise FormatError("overlay payload does not match overlay_shape")
        overlay = np.frombuffer(raw, dtype=np.uint8).reshape(shape).astype(np.float64) / 255.0
        key = SecretKey(
            lam=np.array(data["lambda"], dtype=np.float64),
            mu=np.array(data["mu"], dtype=np.float64),
            overlay=overlay,
            num_classes=int(data["C"]),
            support_size=int(data["m"]),
            alpha=tuple(float(a) for a in data["alpha"]),
            master_seed=int(data["master_seed"]),
            created=str(data["created"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"malformed key file: {e}")
    if len(key.lam) != key.num_classes or len(key.mu) != key.num_classes:
        raise FormatError("lambda/mu length does not match C")
    return key


def save_key(key: SecretKey, path: str) -> None:
    """写出密钥文件；文件对所有人可读时给出警告"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(key_to_dict(key), f, ensure_ascii=False, indent=2)
    mode = os.stat(path).st_mode
    if mode & stat.S_IROTH:
        logger.warning(f"密钥文件 {path} 对所有用户可读，这是水印的秘密，请执行 chmod 600")
    logger.info(f"密钥已保存: {path} (指纹 {key.fingerprint})")


def load_key(path: str) -> SecretKey:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"key file is not valid JSON: {e}")
    return key_from_dict(data)


def save_json(data: Dict[str, Any], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def save_report(report: Any, path: str) -> None:
    """保存验证 / USR 报告；接受 dict 或带 to_dict() 的报告对象"""
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    save_json(data, path)
    logger.info(f"报告已保存: {path}")


def load_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """写CSV，数值保留固定小数位以保证重复运行得到相同文件"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(value: Any) -> Any:
    if value is None:
        return "-"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}"
    return value


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
