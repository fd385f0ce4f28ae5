"""
推理轨迹：注意力日志与剪枝轨迹

AttentionLog 导出为 CSV（block,provenance,score,retained_flag），
PruneTrace 导出为 JSON，列出每个剪枝 block 保留/剪掉的 provenance 及其分数。
两者都是 analysis 模块的输入。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from prune_ast import TRACE_FORMAT_VERSION
from prune_ast.config import Aggregation, DiscardGroup, PruneMetric
from prune_ast.errors import TraceFormatError
from prune_ast.tensor import keep_count


logger = logging.getLogger(__name__)

LOG_COLUMNS = ["block", "provenance", "score", "retained_flag"]


class AttentionLog:
    """按 block 累积每个 token 的注意力分数与保留状态"""

    def __init__(self):
        self._chunks: list[pd.DataFrame] = []

    def add(
        self,
        block: int,
        provenance: np.ndarray,
        scores: np.ndarray,
        retained: Optional[np.ndarray] = None,
    ) -> None:
        if retained is None:
            retained = np.ones(len(provenance), dtype=bool)
        self._chunks.append(
            pd.DataFrame(
                {
                    "block": np.full(len(provenance), block, dtype=np.int64),
                    "provenance": np.asarray(provenance, dtype=np.int64),
                    "score": np.asarray(scores, dtype=np.float64),
                    "retained_flag": np.asarray(retained, dtype=np.int64),
                }
            )
        )

    def __len__(self) -> int:
        return sum(len(c) for c in self._chunks)

    def to_frame(self) -> pd.DataFrame:
        if not self._chunks:
            dtypes = {"block": "int64", "provenance": "int64", "score": "float64", "retained_flag": "int64"}
            return pd.DataFrame({c: pd.Series(dtype=dtypes[c]) for c in LOG_COLUMNS})
        return pd.concat(self._chunks, ignore_index=True)

    def blocks(self) -> list[int]:
        return sorted({int(c["block"].iloc[0]) for c in self._chunks if len(c)})

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "AttentionLog":
        missing = [c for c in LOG_COLUMNS if c not in frame.columns]
        if missing:
            raise TraceFormatError(f"注意力日志缺少列: {missing}")
        log = cls()
        for block, chunk in frame.groupby("block", sort=True):
            log.add(
                int(block),
                chunk["provenance"].to_numpy(),
                chunk["score"].to_numpy(),
                chunk["retained_flag"].to_numpy().astype(bool),
            )
        return log

    @classmethod
    def read_csv(cls, path: Path) -> "AttentionLog":
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise TraceFormatError(f"无法读取注意力日志 {path}: {e}") from e
        for column in ("block", "provenance", "retained_flag"):
            if column in frame.columns and not pd.api.types.is_integer_dtype(frame[column]):
                raise TraceFormatError(f"{path}: 列 {column} 必须为整数")
        return cls.from_frame(frame)


@dataclass
class PruneStep:
    block: int
    metric: PruneMetric
    retained: np.ndarray
    pruned: np.ndarray
    retained_scores: np.ndarray
    pruned_scores: np.ndarray

    @property
    def before(self) -> int:
        return len(self.retained) + len(self.pruned)

    def to_dict(self) -> dict[str, Any]:
        return {
            "block": self.block,
            "metric": self.metric.value,
            "retained": [int(p) for p in self.retained],
            "pruned": [int(p) for p in self.pruned],
            "retained_scores": [float(s) for s in self.retained_scores],
            "pruned_scores": [float(s) for s in self.pruned_scores],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PruneStep":
        try:
            step = cls(
                block=int(data["block"]),
                metric=PruneMetric(data["metric"]),
                retained=np.asarray(data["retained"], dtype=np.int64),
                pruned=np.asarray(data["pruned"], dtype=np.int64),
                retained_scores=np.asarray(data["retained_scores"], dtype=np.float64),
                pruned_scores=np.asarray(data["pruned_scores"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f"剪枝步骤格式不合法: {e}") from e
        if len(step.retained_scores) != len(step.retained) or len(step.pruned_scores) != len(
            step.pruned
        ):
            raise TraceFormatError(f"block {step.block}: 分数个数与 provenance 个数不一致")
        return step


@dataclass
class DiscardStep:
    """分组丢弃消融在 block 结束后整体去掉的一组 token，不受 keep-rate 约束"""

    block: int
    group: DiscardGroup
    retained: np.ndarray
    pruned: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "block": self.block,
            "group": self.group.value,
            "retained": [int(p) for p in self.retained],
            "pruned": [int(p) for p in self.pruned],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DiscardStep":
        try:
            return cls(
                block=int(data["block"]),
                group=DiscardGroup(data["group"]),
                retained=np.asarray(data["retained"], dtype=np.int64),
                pruned=np.asarray(data["pruned"], dtype=np.int64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f"分组丢弃记录格式不合法: {e}") from e


@dataclass
class PruneTrace:
    metric: PruneMetric
    keep_rate: float
    locations: tuple[int, ...]
    aggregation: Aggregation
    n_tokens: int
    n_time: int
    n_freq: int
    content_frames: int
    steps: list[PruneStep] = field(default_factory=list)
    discard: Optional[DiscardStep] = None

    def step_at(self, block: int) -> Optional[PruneStep]:
        for step in self.steps:
            if step.block == block:
                return step
        return None

    def events(self) -> list[PruneStep | DiscardStep]:
        """按执行顺序排列的剪枝与丢弃；同一 block 内 TopK 在 MLP 之前，丢弃在 block 结束后"""
        ordered = [(s.block, 0, i, s) for i, s in enumerate(self.steps)]
        if self.discard is not None:
            ordered.append((self.discard.block, 1, 0, self.discard))
        return [event for *_, event in sorted(ordered, key=lambda item: item[:3])]

    def final_retained(self) -> np.ndarray:
        """最后一次剪枝或丢弃之后存活的 provenance；两者都没有时为全部 patch"""
        events = self.events()
        if not events:
            return np.arange(self.n_tokens, dtype=np.int64)
        return events[-1].retained

    def pruned_at(self) -> np.ndarray:
        """每个 patch 被剪掉的 block 编号（1-based），0 表示一直存活"""
        result = np.zeros(self.n_tokens, dtype=np.int64)
        for event in self.events():
            result[event.pruned] = event.block
        return result

    def validate(self) -> None:
        """R ∪ P 等于剪枝前集合、R ∩ P 为空、|R| = ceil(|R∪P|·kr)，且前后步骤（含分组丢弃）首尾相接"""
        current = np.arange(self.n_tokens, dtype=np.int64)
        for step in self.events():
            if isinstance(step, DiscardStep):
                union = np.concatenate([step.retained, step.pruned])
                if len(np.unique(union)) != len(union) or not np.array_equal(np.sort(union), current):
                    raise TraceFormatError(f"block {step.block}: 分组丢弃的 R ∪ P 与丢弃前的 token 集合不一致")
                current = np.sort(step.retained)
                continue
            if step.block not in self.locations:
                raise TraceFormatError(f"block {step.block} 不在剪枝位置 {list(self.locations)} 中")
            union = np.concatenate([step.retained, step.pruned])
            if len(np.unique(union)) != len(union):
                raise TraceFormatError(f"block {step.block}: 保留集与剪枝集相交")
            if not np.array_equal(np.sort(union), current):
                raise TraceFormatError(f"block {step.block}: R ∪ P 与剪枝前的 token 集合不一致")
            expected = keep_count(len(union), self.keep_rate)
            if len(step.retained) != expected:
                raise TraceFormatError(
                    f"block {step.block}: 保留 {len(step.retained)} 个，应为 ceil({len(union)}×{self.keep_rate}) = {expected}"
                )
            current = np.sort(step.retained)

    def to_dict(self) -> dict[str, Any]:
        data = {
            "format_version": TRACE_FORMAT_VERSION,
            "metric": self.metric.value,
            "keep_rate": self.keep_rate,
            "locations": list(self.locations),
            "aggregation": self.aggregation.value,
            "n_tokens": self.n_tokens,
            "n_time": self.n_time,
            "n_freq": self.n_freq,
            "content_frames": self.content_frames,
            "steps": [s.to_dict() for s in self.steps],
        }
        # 普通推理的轨迹不写 discard 字段
        if self.discard is not None:
            data["discard"] = self.discard.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "PruneTrace":
        if not isinstance(data, dict):
            raise TraceFormatError("剪枝轨迹顶层必须是对象")
        version = data.get("format_version")
        if version != TRACE_FORMAT_VERSION:
            raise TraceFormatError(f"剪枝轨迹版本 {version} 不受支持（期望 {TRACE_FORMAT_VERSION}）")
        try:
            trace = cls(
                metric=PruneMetric(data["metric"]),
                keep_rate=float(data["keep_rate"]),
                locations=tuple(int(b) for b in data["locations"]),
                aggregation=Aggregation(data["aggregation"]),
                n_tokens=int(data["n_tokens"]),
                n_time=int(data["n_time"]),
                n_freq=int(data["n_freq"]),
                content_frames=int(data["content_frames"]),
                steps=[PruneStep.from_dict(s) for s in data["steps"]],
                discard=None if data.get("discard") is None else DiscardStep.from_dict(data["discard"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TraceFormatError(f"剪枝轨迹格式不合法: {e}") from e
        if trace.n_time * trace.n_freq != trace.n_tokens:
            raise TraceFormatError(
                f"n_time×n_freq = {trace.n_time * trace.n_freq} 与 n_tokens = {trace.n_tokens} 不一致"
            )
        trace.validate()
        return trace

    def write_json(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read_json(cls, path: Path) -> "PruneTrace":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise TraceFormatError(f"无法读取剪枝轨迹 {path}: {e}") from e
        return cls.from_dict(data)
