import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from prune_ast.model import ModelWeights


@dataclass(frozen=True)
class LoadedModel:
    """已载入的模型：只读权重与其来源（权重文件或玩具初始化的 seed）"""

    weights: ModelWeights
    source: Optional[Path] = None
    seed: Optional[int] = None

    def describe(self) -> dict:
        cfg = self.weights.config
        return {
            "depth": cfg.depth,
            "dim": cfg.dim,
            "heads": cfg.heads,
            "aggregation": cfg.aggregation.value,
            "num_classes": cfg.num_classes,
            "num_patches": cfg.num_patches,
            "source": str(self.source) if self.source else None,
            "seed": self.seed,
        }


class ModelRegistry:
    def __init__(self):
        """初始化模型注册表，MCP 工具可能在不同线程中并发访问"""
        self._models: dict[str, LoadedModel] = {}
        self._lock = threading.Lock()

    def register(self, model: LoadedModel) -> str:
        model_id = str(uuid.uuid4())
        with self._lock:
            self._models[model_id] = model
        return model_id

    def get(self, model_id: str) -> Optional[LoadedModel]:
        with self._lock:
            return self._models.get(model_id)

    def unregister(self, model_id: str) -> bool:
        with self._lock:
            return self._models.pop(model_id, None) is not None

    def list(self) -> list[str]:
        with self._lock:
            return list(self._models.keys())

    def clear(self) -> None:
        with self._lock:
            self._models.clear()

    def count(self) -> int:
        with self._lock:
            return len(self._models)

    def exists(self, model_id: str) -> bool:
        with self._lock:
            return model_id in self._models
