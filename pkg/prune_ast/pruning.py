"""
TopK token 剪枝

在剪枝 block 中，MHSA 之后、MLP 之前按指标给 token 打分，保留 ceil(n·kr) 个得分最高的 token。
指标：
    attn-mp    所有查询行对该 token 注意力的平均
    attn-cls   CLS 行对该 token 的注意力
    intensity  来源 patch 的均值（不随深度变化）
    variation  来源 patch 的标准差
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from prune_ast.config import DiscardGroup, PruneConfig, PruneMetric
from prune_ast.errors import (
    ClusterError,
    ConfigError,
    EmptySurvivorError,
    EmptyTokenSetError,
    MissingScoreInputError,
    PruningError,
    ShapeError,
)
from prune_ast.frontend import PatchStats
from prune_ast.tensor import keep_count, topk_indices
from prune_ast.tokens import AttentionRecord, TokenState
from prune_ast.trace import PruneStep

if TYPE_CHECKING:
    from prune_ast.analysis import ClusterModel


logger = logging.getLogger(__name__)


def score_tokens(
    state: TokenState,
    record: Optional[AttentionRecord],
    stats: Optional[PatchStats],
    metric: PruneMetric,
) -> np.ndarray:
    """每个当前非 CLS token 一个分数，顺序与 state.provenance 一致"""
    if metric.uses_attention:
        if record is None:
            raise MissingScoreInputError(f"指标 {metric.value} 需要注意力记录")
        scores = record.cls_scores() if metric is PruneMetric.ATTN_CLS else record.mean_pooling_scores()
    else:
        if stats is None:
            raise MissingScoreInputError(f"指标 {metric.value} 需要 patch 统计量")
        feature = stats.mean if metric is PruneMetric.INTENSITY else stats.std
        if state.n_tokens and int(state.provenance.max()) >= len(feature):
            raise ShapeError("score_tokens", (len(feature),), (int(state.provenance.max()) + 1,))
        scores = feature[state.provenance]
    if len(scores) != state.n_tokens:
        raise ShapeError("score_tokens", (len(scores),), (state.n_tokens,))
    return np.asarray(scores, dtype=np.float64)


def attention_log_scores(record: AttentionRecord, metric: PruneMetric) -> np.ndarray:
    """写入注意力日志的分数：attn-mp 剪枝时用平均分数，其余情况按模型是否有 CLS 决定"""
    if metric is PruneMetric.ATTN_MP:
        return record.mean_pooling_scores()
    return record.scores()


def select_topk(scores, keep_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """返回 (保留下标, 剪掉下标)，都按下标升序"""
    values = np.asarray(scores)
    n = len(values)
    if n == 0:
        raise EmptyTokenSetError("没有可供剪枝的 token")
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError([f"keep_rate={keep_rate} 必须在 (0, 1] 内"])
    retained = topk_indices(values, keep_count(n, keep_rate))
    mask = np.ones(n, dtype=bool)
    mask[retained] = False
    return retained, np.flatnonzero(mask)


def apply_prune(state: TokenState, retained) -> TokenState:
    """按下标保留 token 行与 provenance，保持原有顺序；CLS 行不受影响"""
    index = np.sort(np.asarray(retained, dtype=np.int64))
    if index.size and (index[0] < 0 or index[-1] >= state.n_tokens):
        raise PruningError(f"保留下标超出范围 [0, {state.n_tokens})")
    if len(np.unique(index)) != len(index):
        raise PruningError("保留下标重复")
    rows = np.concatenate([[0], index + 1]) if state.has_cls else index
    return TokenState(
        activations=state.activations[rows],
        provenance=state.provenance[index],
        has_cls=state.has_cls,
    )


@dataclass(frozen=True)
class KeepRateSchedule:
    """EViT 式 keep-rate 线性衰减：start 之前为 1，持续 duration 个 epoch 降到 target"""

    start_epoch: int
    duration_epochs: int
    target_kr: float

    def validate(self) -> list[str]:
        problems = []
        if self.start_epoch < 0:
            problems.append(f"start_epoch={self.start_epoch} 必须 >= 0")
        if self.duration_epochs < 0:
            problems.append(f"duration_epochs={self.duration_epochs} 必须 >= 0")
        if not 0.0 < self.target_kr <= 1.0:
            problems.append(f"target_kr={self.target_kr} 必须在 (0, 1] 内")
        return problems


def keep_rate_at_epoch(schedule: KeepRateSchedule, epoch: int) -> float:
    problems = schedule.validate()
    if epoch < 0:
        problems.append(f"epoch={epoch} 必须 >= 0")
    if problems:
        raise ConfigError(problems)
    if epoch < schedule.start_epoch:
        return 1.0
    if schedule.duration_epochs == 0:
        return schedule.target_kr
    progress = min(1.0, (epoch - schedule.start_epoch) / schedule.duration_epochs)
    return 1.0 - (1.0 - schedule.target_kr) * progress


def discard_group(
    state: TokenState,
    cluster_model: "ClusterModel",
    group: DiscardGroup,
    stats: PatchStats,
) -> TokenState:
    """丢弃来源 patch 均值落在 L（C1/C2）或 H（C4/C5）中的全部 token，C3 总会保留"""
    if cluster_model.feature != "mean":
        raise ClusterError(f"分组丢弃需要按均值聚类，当前为 {cluster_model.feature}")
    clusters = cluster_model.assign(stats.mean[state.provenance])
    keep = ~np.isin(clusters, group.clusters)
    if not keep.any():
        raise EmptySurvivorError(f"组 {group.value} 覆盖全部 {state.n_tokens} 个 token，无存活")
    return apply_prune(state, np.flatnonzero(keep))


@dataclass(frozen=True)
class GroupDiscard:
    """在第 at_block 个 block 整体结束后执行一次分组丢弃"""

    cluster_model: "ClusterModel"
    group: DiscardGroup
    at_block: int


class TopKPruner:
    """
    block 钩子：hook(block_index, state, record) -> state

    在配置的位置上打分并剪枝，同时记录每一步的保留/剪枝集合。
    kr = 1 时不改动 state，因此与不剪枝的前向逐位一致。
    """

    def __init__(self, prune: PruneConfig, stats: Optional[PatchStats] = None):
        self.prune = prune
        self.stats = stats
        self.steps: list[PruneStep] = []

    def __call__(self, block_index: int, state: TokenState, record: AttentionRecord) -> TokenState:
        if block_index not in self.prune.locations:
            return state
        scores = score_tokens(state, record, self.stats, self.prune.metric)
        retained, pruned = select_topk(scores, self.prune.keep_rate)
        self.steps.append(
            PruneStep(
                block=block_index,
                metric=self.prune.metric,
                retained=state.provenance[retained],
                pruned=state.provenance[pruned],
                retained_scores=scores[retained],
                pruned_scores=scores[pruned],
            )
        )
        logger.debug("block %d: %d → %d 个 token", block_index, state.n_tokens, len(retained))
        if len(pruned) == 0:
            return state
        return apply_prune(state, retained)

    def step_at(self, block_index: int) -> Optional[PruneStep]:
        for step in self.steps:
            if step.block == block_index:
                return step
        return None
