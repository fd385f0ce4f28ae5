"""
token 状态与注意力记录

TokenState 在 block 与剪枝之间传递：激活矩阵 + 每个 token 的来源 patch 下标（provenance）。
CLS token 若存在，总在第 0 行，不计入 provenance。
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from prune_ast.errors import MissingClsError, ShapeError


@dataclass(frozen=True)
class TokenState:
    activations: np.ndarray
    provenance: np.ndarray
    has_cls: bool = False

    def __post_init__(self):
        expected = len(self.provenance) + int(self.has_cls)
        if self.activations.ndim != 2 or self.activations.shape[0] != expected:
            raise ShapeError("TokenState", self.activations.shape, (expected, -1))

    @property
    def n_tokens(self) -> int:
        """不含 CLS 的 token 数"""
        return len(self.provenance)

    @property
    def dim(self) -> int:
        return self.activations.shape[1]

    def token_rows(self) -> np.ndarray:
        return self.activations[1:] if self.has_cls else self.activations

    def with_activations(self, activations: np.ndarray) -> "TokenState":
        return replace(self, activations=activations)


def attention_scores_mean_pooling(attention: np.ndarray, has_cls: bool = False) -> np.ndarray:
    """
    每个 token 收到的平均注意力：a_i = Σ_h Σ_n A[h, n, i] / (H·N')

    has_cls 为真时只取非 CLS 列，对所有查询行（含 CLS 行）求平均。
    """
    if attention.ndim != 3 or attention.shape[1] != attention.shape[2]:
        raise ShapeError("attention_scores_mean_pooling", attention.shape, ("H", "N", "N"))
    heads, rows, _ = attention.shape
    columns = attention[:, :, 1:] if has_cls else attention
    return columns.sum(axis=(0, 1), dtype=np.float64) / (heads * rows)


def attention_scores_cls(attention: np.ndarray, has_cls: bool = True) -> np.ndarray:
    """CLS 行对各 token 的注意力的多头平均：a_i = Σ_h A[h, 0, i] / H，不含 CLS 自身"""
    if not has_cls:
        raise MissingClsError("attn-cls 分数需要 CLS token")
    if attention.ndim != 3 or attention.shape[1] != attention.shape[2] or attention.shape[2] < 2:
        raise ShapeError("attention_scores_cls", attention.shape, ("H", "N+1", "N+1"))
    return attention[:, 0, 1:].mean(axis=0, dtype=np.float64)


@dataclass
class AttentionRecord:
    """单个 block 的注意力；A 形状为 (H, n, n)，n 含 CLS"""

    block_index: int
    attention: np.ndarray
    provenance: np.ndarray
    has_cls: bool = False
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def heads(self) -> int:
        return self.attention.shape[0]

    def mean_pooling_scores(self) -> np.ndarray:
        if "mp" not in self._cache:
            self._cache["mp"] = attention_scores_mean_pooling(self.attention, self.has_cls)
        return self._cache["mp"]

    def cls_scores(self) -> np.ndarray:
        if "cls" not in self._cache:
            self._cache["cls"] = attention_scores_cls(self.attention, self.has_cls)
        return self._cache["cls"]

    def scores(self, use_cls: Optional[bool] = None) -> np.ndarray:
        """默认按模型聚合方式取分数：有 CLS 用 CLS 行，否则用平均"""
        if use_cls is None:
            use_cls = self.has_cls
        return self.cls_scores() if use_cls else self.mean_pooling_scores()
