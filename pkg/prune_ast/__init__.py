"""
prune-ast - 音频频谱 Transformer 的 TopK token 剪枝推理与分析引擎

在网络内部按注意力分数（或 patch 统计量）裁剪 token，并提供 MAC 成本模型、
聚类、Kendall τ、注意力比值、保留直方图与分组丢弃消融等分析工具。
"""

try:
    from prune_ast._version import __version__
except ImportError:
    __version__ = "0.0.0.dev0"

__author__ = "MaaXYZ"
__email__ = "mistereo@hotmail.com"

# 各持久化格式的版本号，写入 run_manifest.json
WEIGHT_FORMAT_VERSION = 1
TRACE_FORMAT_VERSION = 1
