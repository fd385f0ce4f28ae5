import logging
from pathlib import Path
from typing import Optional, Union

from prune_ast.config import Aggregation, ModelConfig, PruneConfig, PruneMetric, RunConfig, parse_locations
from prune_ast.core import mcp, model_registry
from prune_ast.errors import ConfigError, PruneAstError
from prune_ast.frontend import prepare_input
from prune_ast.mac import mac_ratio, total_macs
from prune_ast.model import ModelWeights, classify_forward
from prune_ast.paths import get_weights_dir
from prune_ast.pruning import KeepRateSchedule, keep_rate_at_epoch
from prune_ast.registry import LoadedModel
from prune_ast.weights import load_weights, random_init, save_weights


logger = logging.getLogger(__name__)


def _error(e: Exception) -> str:
    logger.warning("工具调用失败: %s", e)
    return f"错误: {e}"


def _model_config(depth: int, dim: int, heads: int, aggregation: str, num_classes: int) -> ModelConfig:
    try:
        cfg = ModelConfig(
            depth=depth,
            dim=dim,
            heads=heads,
            aggregation=Aggregation(aggregation),
            num_classes=num_classes,
        )
    except ValueError as e:
        raise ConfigError([f"aggregation={aggregation!r} 不合法"]) from e
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


@mcp.tool(
    name="make_toy_model",
    description="""
    随机初始化一个玩具模型并载入内存。

    参数：
    - depth: block 数，默认 12，需不少于最大剪枝位置
    - dim: 嵌入维度，默认 64，必须能被 heads 整除
    - heads: 注意力头数，默认 4
    - aggregation: 聚合方式，"mean-pooling"（默认）或 "cls"
    - num_classes: 类别数，默认 10
    - seed: 随机种子，默认 0；相同 seed 得到逐位相同的权重
    - save: 是否同时保存为 TPWT 文件（保存在数据目录的 weights 子目录下），默认 False

    返回值：
    - 成功：返回 model_id 字符串
    - 失败：返回错误信息字符串
""",
)
def make_toy_model(
    depth: int = 12,
    dim: int = 64,
    heads: int = 4,
    aggregation: str = "mean-pooling",
    num_classes: int = 10,
    seed: int = 0,
    save: bool = False,
) -> str:
    try:
        cfg = _model_config(depth, dim, heads, aggregation, num_classes)
        tensors = random_init(cfg, seed=seed)
        source = None
        if save:
            source = get_weights_dir() / f"toy_d{depth}_D{dim}_h{heads}_s{seed}.tpwt"
            save_weights(tensors, source)
        model = LoadedModel(weights=ModelWeights.from_tensors(tensors, cfg), source=source, seed=seed)
    except PruneAstError as e:
        return _error(e)
    return model_registry.register(model)


@mcp.tool(
    name="load_model",
    description="""
    载入 TPWT 权重文件。

    参数：
    - weights_path: 权重文件路径
    - config_path: 可选的 JSON 配置文件，读取其中的 model 段；不提供时使用下方参数
    - depth / dim / heads / aggregation / num_classes: 模型尺寸，需与权重文件一致

    返回值：
    - 成功：返回 model_id 字符串
    - 失败：返回错误信息字符串（如形状不匹配会指出出错的条目名）
""",
)
def load_model(
    weights_path: str,
    config_path: Optional[str] = None,
    depth: int = 12,
    dim: int = 64,
    heads: int = 4,
    aggregation: str = "mean-pooling",
    num_classes: int = 10,
) -> str:
    try:
        if config_path:
            cfg = RunConfig.from_json(Path(config_path)).model
        else:
            cfg = _model_config(depth, dim, heads, aggregation, num_classes)
        path = Path(weights_path)
        weights = ModelWeights.from_tensors(load_weights(path, cfg), cfg)
    except (PruneAstError, OSError) as e:
        return _error(e)
    return model_registry.register(LoadedModel(weights=weights, source=path))


@mcp.tool(
    name="unload_model",
    description="""
    释放已载入的模型。

    参数：
    - model_id: 模型 ID

    返回值：
    - 成功：返回 True
    - 模型不存在：返回 False
""",
)
def unload_model(model_id: str) -> bool:
    return model_registry.unregister(model_id)


@mcp.tool(
    name="list_models",
    description="""
    列出已载入的模型及其配置。

    返回值：
    - 字典：model_id -> {depth, dim, heads, aggregation, num_classes, num_patches, source, seed}
""",
)
def list_models() -> dict[str, dict]:
    result = {}
    for model_id in model_registry.list():
        model = model_registry.get(model_id)
        if model is not None:
            result[model_id] = model.describe()
    return result


@mcp.tool(
    name="infer_file",
    description="""
    对单个 WAV 或频谱文件推理，可同时进行 TopK token 剪枝。

    参数：
    - model_id: 模型 ID，由 make_toy_model() 或 load_model() 返回
    - input_path: 16 kHz 16-bit PCM WAV，或 128 列的频谱 CSV / TPWT 文件
    - keep_rate: 每个剪枝位置保留的比例，(0, 1]，默认 1.0（不剪枝）
    - metric: "attn-mp"（默认）、"attn-cls"（需要 cls 模型）、"intensity" 或 "variation"
    - prune_blocks: 1-based 剪枝位置，逗号分隔，默认 "4,7,10"；必须不超过模型深度

    返回值：
    - 成功：字典，包含 n_tokens、logits、top_class、steps（每个剪枝 block 的 before/after）、macs
    - 失败：返回错误信息字符串
""",
)
def infer_file(
    model_id: str,
    input_path: str,
    keep_rate: float = 1.0,
    metric: str = "attn-mp",
    prune_blocks: str = "4,7,10",
) -> Union[dict, str]:
    model = model_registry.get(model_id)
    if model is None:
        return f"错误: 模型 {model_id} 不存在"
    cfg = model.weights.config
    try:
        try:
            prune = PruneConfig(locations=parse_locations(prune_blocks), keep_rate=keep_rate, metric=PruneMetric(metric))
        except ValueError as e:
            raise ConfigError([f"metric={metric!r} 不合法"]) from e
        run = RunConfig(model=cfg, prune=prune)
        grid, stats = prepare_input(Path(input_path), run.frontend)
        result = classify_forward(grid, model.weights, cfg, prune, stats=stats)
    except (PruneAstError, OSError) as e:
        return _error(e)
    report = total_macs(grid.n_tokens, keep_rate, cfg, prune)
    return {
        "n_tokens": grid.n_tokens,
        "logits": [float(v) for v in result.logits],
        "top_class": int(result.logits.argmax()),
        "steps": [
            {"block": s.block, "before": s.before, "after": len(s.retained)} for s in result.trace.steps
        ],
        "macs": report.total,
    }


@mcp.tool(
    name="estimate_macs",
    description="""
    估算剪枝后的 MAC（乘加次数），默认按 ViT-B（12 层、768 维、CLS）计算。

    参数：
    - n_tokens: patch 数 N（1 s / 5 s / 10 s 音频分别为 64 / 256 / 512）
    - keep_rate: 每个剪枝位置保留的比例，(0, 1]
    - prune_blocks: 1-based 剪枝位置，默认 "4,7,10"

    返回值：
    - 成功：字典，包含 total_G、mac_ratio（相对不剪枝）以及每个 block 的 token 数
    - 失败：返回错误信息字符串
""",
)
def estimate_macs(n_tokens: int, keep_rate: float, prune_blocks: str = "4,7,10") -> Union[dict, str]:
    cfg = ModelConfig.vit_base()
    try:
        prune = PruneConfig(locations=parse_locations(prune_blocks), keep_rate=keep_rate)
        problems = prune.validate(cfg)
        if n_tokens < 1:
            problems.append(f"n_tokens={n_tokens} 必须 >= 1")
        if problems:
            raise ConfigError(problems)
        report = total_macs(n_tokens, keep_rate, cfg, prune)
        ratio = mac_ratio(n_tokens, keep_rate, cfg, prune.locations)
    except PruneAstError as e:
        return _error(e)
    return {
        "total_G": report.total_g,
        "mac_ratio": round(ratio, 4),
        "attn_tokens": [b.attn_tokens for b in report.blocks],
        "mlp_tokens": [b.mlp_tokens for b in report.blocks],
    }


@mcp.tool(
    name="keep_rate_schedule",
    description="""
    计算训练时逐 epoch 的 keep-rate：start_epoch 之前为 1.0，
    之后 duration_epochs 个 epoch 内线性降到 target_kr，此后保持 target_kr。

    参数：
    - start_epoch: 开始衰减的 epoch
    - duration_epochs: 衰减持续的 epoch 数
    - target_kr: 最终 keep-rate，(0, 1]
    - epochs: 返回 0..epochs-1 的取值

    返回值：
    - 成功：keep-rate 列表
    - 失败：返回错误信息字符串
""",
)
def keep_rate_schedule(start_epoch: int, duration_epochs: int, target_kr: float, epochs: int) -> Union[list[float], str]:
    schedule = KeepRateSchedule(start_epoch, duration_epochs, target_kr)
    try:
        return [keep_rate_at_epoch(schedule, e) for e in range(epochs)]
    except PruneAstError as e:
        return _error(e)
