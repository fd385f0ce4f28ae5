"""
ViT 前向推理

pre-norm block：LN → MHSA → 残差 → [剪枝钩子] → LN → MLP(GELU) → 残差。
剪枝钩子夹在 MHSA 与 MLP 之间，打分所用的注意力就是同一 block 的 MHSA 输出。
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from prune_ast.config import Aggregation, ModelConfig, PruneConfig
from prune_ast.errors import AggregationMismatchError, ConfigError, NonFiniteError, ShapeError
from prune_ast.frontend import PatchGrid, PatchStats
from prune_ast.pruning import GroupDiscard, TopKPruner, attention_log_scores, discard_group
from prune_ast.tensor import DTYPE, bmm, gelu, layer_norm, linear, softmax_rows
from prune_ast.tokens import (
    AttentionRecord,
    TokenState,
    attention_scores_cls,
    attention_scores_mean_pooling,
)
from prune_ast.trace import AttentionLog, DiscardStep, PruneTrace
from prune_ast.weights import validate_weights


logger = logging.getLogger(__name__)

__all__ = [
    "AttentionRecord",
    "BlockWeights",
    "ForwardResult",
    "ModelWeights",
    "TokenState",
    "aggregate",
    "attention_scores_cls",
    "attention_scores_mean_pooling",
    "block_forward",
    "classify_forward",
    "mhsa_forward",
    "mlp_forward",
    "patch_embed",
]

PruneHook = Callable[[int, TokenState, AttentionRecord], TokenState]


@dataclass(frozen=True)
class BlockWeights:
    norm1_weight: np.ndarray
    norm1_bias: np.ndarray
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    norm2_weight: np.ndarray
    norm2_bias: np.ndarray
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], index: int) -> "BlockWeights":
        p = f"blocks.{index}"
        return cls(
            **{
                f"{layer}_{kind}": tensors[f"{p}.{layer}.{kind}"]
                for layer in ("norm1", "qkv", "proj", "norm2", "fc1", "fc2")
                for kind in ("weight", "bias")
            }
        )


@dataclass(frozen=True)
class ModelWeights:
    """按 ModelConfig 校验过的只读权重，可在线程间共享"""

    config: ModelConfig
    tensors: Mapping[str, np.ndarray]
    blocks: tuple[BlockWeights, ...]

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], config: ModelConfig) -> "ModelWeights":
        validate_weights(tensors, config)
        frozen = {}
        for name, tensor in tensors.items():
            array = np.array(tensor, dtype=DTYPE)
            array.setflags(write=False)
            frozen[name] = array
        blocks = tuple(BlockWeights.from_tensors(frozen, i) for i in range(config.depth))
        return cls(config=config, tensors=frozen, blocks=blocks)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def patch_embed(grid: PatchGrid, weights: ModelWeights) -> TokenState:
    """展平的 patch 线性投影 + 按 provenance 取位置编码；cls 模式在最前面插入 CLS"""
    cfg = weights.config
    if grid.n_tokens > cfg.num_patches:
        raise ShapeError("patch_embed", (grid.n_tokens,), (cfg.num_patches,))
    provenance = np.arange(grid.n_tokens, dtype=np.int64)
    x = linear(grid.flattened(), weights["patch_embed.weight"], weights["patch_embed.bias"])
    x += weights["pos_embed"][provenance]
    if cfg.has_cls:
        cls_row = (weights["cls_token"] + weights["cls_pos"]).reshape(1, -1)
        x = np.concatenate([cls_row, x], axis=0)
    return TokenState(activations=x, provenance=provenance, has_cls=cfg.has_cls)


def mhsa_forward(
    state: TokenState,
    bw: BlockWeights,
    heads: int,
    block_index: int = 0,
) -> tuple[TokenState, AttentionRecord]:
    """多头自注意力（含第一个 LayerNorm 与残差），缩放因子 1/√(D/H)"""
    x = state.activations
    n, d = x.shape
    if d % heads != 0:
        raise ShapeError("mhsa_forward", (d,), (heads,))
    head_dim = d // heads
    h = layer_norm(x, bw.norm1_weight, bw.norm1_bias)
    qkv = linear(h, bw.qkv_weight, bw.qkv_bias)
    # (n, 3D) → (3, H, n, head_dim)
    qkv = np.ascontiguousarray(qkv.reshape(n, 3, heads, head_dim).transpose(1, 2, 0, 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = bmm(q, np.ascontiguousarray(k.transpose(0, 2, 1)))
    attention = softmax_rows(logits, scale=1.0 / math.sqrt(head_dim))
    context = bmm(attention, v).transpose(1, 0, 2).reshape(n, d)
    out = x + linear(np.ascontiguousarray(context), bw.proj_weight, bw.proj_bias)
    record = AttentionRecord(
        block_index=block_index,
        attention=attention,
        provenance=state.provenance,
        has_cls=state.has_cls,
    )
    return state.with_activations(out), record


def mlp_forward(state: TokenState, bw: BlockWeights) -> TokenState:
    x = state.activations
    h = layer_norm(x, bw.norm2_weight, bw.norm2_bias)
    h = gelu(linear(h, bw.fc1_weight, bw.fc1_bias))
    return state.with_activations(x + linear(h, bw.fc2_weight, bw.fc2_bias))


def block_forward(
    state: TokenState,
    bw: BlockWeights,
    heads: int,
    block_index: int,
    hook: Optional[PruneHook] = None,
) -> tuple[TokenState, AttentionRecord]:
    state, record = mhsa_forward(state, bw, heads, block_index)
    if hook is not None:
        state = hook(block_index, state, record)
    return mlp_forward(state, bw), record


def aggregate(state: TokenState, mode: Aggregation) -> np.ndarray:
    if mode is Aggregation.CLS:
        if not state.has_cls:
            raise AggregationMismatchError("cls 聚合需要 CLS token")
        return state.activations[0].copy()
    if state.has_cls:
        raise AggregationMismatchError("mean-pooling 聚合的状态不应包含 CLS token")
    return state.activations.mean(axis=0, dtype=np.float64).astype(DTYPE)


@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: PruneTrace
    log: AttentionLog
    # 最终存活的 provenance（含分组丢弃的影响）
    survivors: np.ndarray


def _check_finite(stage: str, values: np.ndarray) -> None:
    bad = int(np.count_nonzero(~np.isfinite(values)))
    if bad:
        raise NonFiniteError(stage, bad)


def classify_forward(
    grid: PatchGrid,
    weights: ModelWeights,
    cfg: ModelConfig,
    prune_cfg: PruneConfig,
    stats: Optional[PatchStats] = None,
    discard: Optional[GroupDiscard] = None,
) -> ForwardResult:
    """
    patch_embed → depth 个 block（在配置位置剪枝）→ 最终 LN → 聚合 → 分类头

    Args:
        stats: intensity / variation 指标与分组丢弃需要的 patch 统计量
        discard: 可选的分组丢弃，在指定 block 结束后执行一次

    Returns:
        ForwardResult，包含 logits、剪枝轨迹与每个 block 的注意力日志
    """
    if weights.config != cfg:
        raise ConfigError(["权重对应的 ModelConfig 与本次推理的配置不一致"])
    problems = prune_cfg.validate(cfg)
    if discard is not None:
        if not 1 <= discard.at_block <= cfg.depth:
            problems.append(f"ablate block={discard.at_block} 超出 [1, {cfg.depth}]")
        if stats is None:
            problems.append("分组丢弃需要 patch 统计量")
    if problems:
        raise ConfigError(problems)

    pruner = TopKPruner(prune_cfg, stats)
    log = AttentionLog()
    discard_step = None
    state = patch_embed(grid, weights)
    _check_finite("patch_embed", state.activations)
    for block_index, bw in enumerate(weights.blocks, start=1):
        state, record = block_forward(state, bw, cfg.heads, block_index, hook=pruner)
        _check_finite(f"block {block_index}", state.activations)
        step = pruner.step_at(block_index)
        retained = None if step is None else np.isin(record.provenance, step.retained)
        log.add(block_index, record.provenance, attention_log_scores(record, prune_cfg.metric), retained)
        if discard is not None and discard.at_block == block_index:
            before = state.provenance
            state = discard_group(state, discard.cluster_model, discard.group, stats)
            discard_step = DiscardStep(
                block=block_index,
                group=discard.group,
                retained=state.provenance.copy(),
                pruned=before[~np.isin(before, state.provenance)],
            )
            logger.info("block %d 后丢弃组 %s: %d → %d", block_index, discard.group.value, len(before), state.n_tokens)

    normed = state.with_activations(layer_norm(state.activations, weights["norm.weight"], weights["norm.bias"]))
    feature = aggregate(normed, cfg.aggregation)
    logits = linear(feature.reshape(1, -1), weights["head.weight"], weights["head.bias"])[0]
    _check_finite("head", logits)

    trace = PruneTrace(
        metric=prune_cfg.metric,
        keep_rate=prune_cfg.keep_rate,
        locations=tuple(sorted(prune_cfg.locations)),
        aggregation=cfg.aggregation,
        n_tokens=grid.n_tokens,
        n_time=grid.n_time,
        n_freq=grid.n_freq,
        content_frames=grid.content_frames,
        steps=pruner.steps,
        discard=discard_step,
    )
    return ForwardResult(logits=logits, trace=trace, log=log, survivors=state.provenance.copy())
