"""
数据目录

platformdirs 给出的每用户目录（Linux 下为 ~/.local/share/PruneAST/），其中：
- logs/     MCP 服务日志（stdout 被协议占用）
- weights/  make_toy_model(save=True) 生成的 TPWT
- runs/     CLI 未指定 --out-dir 时的输出
"""

from pathlib import Path

from platformdirs import user_data_dir


APP_NAME = "PruneAST"
APP_AUTHOR = "MaaXYZ"


def get_data_dir() -> Path:
    return Path(user_data_dir(APP_NAME, APP_AUTHOR))


def get_log_dir() -> Path:
    return get_data_dir() / "logs"


def get_weights_dir() -> Path:
    return get_data_dir() / "weights"


def get_output_dir() -> Path:
    return get_data_dir() / "runs"


def ensure_dirs() -> None:
    """core 导入时调用，保证三个子目录都存在"""
    for d in (get_log_dir(), get_weights_dir(), get_output_dir()):
        d.mkdir(parents=True, exist_ok=True)
