from fastmcp import FastMCP

from prune_ast import __version__
from prune_ast.paths import ensure_dirs
from prune_ast.registry import ModelRegistry


# 确保所有必要的目录存在
ensure_dirs()

# 全局模型注册表：model_id -> LoadedModel
model_registry = ModelRegistry()

mcp = FastMCP(
    "PruneAST",
    version=__version__,
    instructions="""
    PruneAST 是一个音频频谱 Transformer 推理与分析服务，
    在网络内部按注意力分数或 patch 统计量进行 TopK token 剪枝，并估算剪枝后的计算量（MAC）。

    标准工作流程：
    1. 准备模型
       - 调用 make_toy_model() 按配置随机初始化一个玩具模型，或
       - 调用 load_model(weights_path) 载入 TPWT 权重文件
       - 两者都返回 model_id，后续操作通过 model_id 指定模型
       - 调用 list_models() 查看已载入的模型，unload_model(model_id) 释放

    2. 推理
       - 调用 infer_file(model_id, input_path, ...) 对 WAV 或频谱文件推理
       - 可指定 keep_rate、metric、prune_blocks 控制剪枝
       - 返回 logits、每个剪枝 block 前后的 token 数，以及对应的 MAC

    3. 成本估算
       - 调用 estimate_macs(n_tokens, keep_rate, ...) 按 ViT-B 尺寸估算 MAC 与相对比例
       - 调用 keep_rate_schedule(...) 查看训练时 keep-rate 的逐 epoch 取值

    注意事项：
    - model_id 为字符串类型，由系统自动生成并管理
    - 操作失败时返回以“错误:”开头的字符串，不会抛出异常
    - WAV 必须为 16 kHz、16-bit PCM，不做重采样
    - 完整的统计分析（聚类、τ、γ、直方图）请使用命令行 prune-ast trace / analyze
    """,
)
