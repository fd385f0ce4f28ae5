"""
日志配置

日志级别由环境变量 PRUNE_AST_LOG 控制（DEBUG/INFO/WARNING/ERROR，默认 WARNING）。
CLI 输出到 stderr；MCP 服务的 stdout 是协议通道，因此额外写入数据目录下的日志文件。
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

from prune_ast.paths import get_log_dir


LOG_ENV_VAR = "PRUNE_AST_LOG"
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def resolve_level(value: Optional[str] = None) -> int:
    """把环境变量值解析为 logging 级别，无法识别时回退到 WARNING"""
    if value is None:
        value = os.environ.get(LOG_ENV_VAR, "")
    value = value.strip().upper()
    if not value:
        return logging.WARNING
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value)
    return level if isinstance(level, int) else logging.WARNING


def setup_logging(log_file: Optional[Path] = None, to_stderr: bool = True) -> logging.Logger:
    """
    配置 prune_ast 顶层 logger

    Args:
        log_file: 额外的日志文件路径，None 表示不写文件
        to_stderr: 是否输出到 stderr

    Returns:
        配置好的 prune_ast logger
    """
    logger = logging.getLogger("prune_ast")
    logger.setLevel(resolve_level())
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
    if to_stderr:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(formatter)
        logger.addHandler(stream)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    logger.propagate = False
    return logger


def server_log_file() -> Path:
    return get_log_dir() / "server.log"
