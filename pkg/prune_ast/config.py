"""
配置数据类

ModelConfig / PruneConfig / FrontendConfig 描述单次推理，RunConfig 把它们与输入、
输出目录、权重路径、随机种子一起打包，供 CLI 与 MCP 工具使用。
JSON 配置文件的各段与数据类字段一一对应，命令行参数覆盖文件中的值。
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from prune_ast.errors import ConfigError


class Aggregation(str, Enum):
    """特征聚合方式"""

    CLS = "cls"
    MEAN_POOLING = "mean-pooling"


class PruneMetric(str, Enum):
    """token 重要性指标"""

    ATTN_MP = "attn-mp"
    ATTN_CLS = "attn-cls"
    INTENSITY = "intensity"
    VARIATION = "variation"

    @property
    def uses_attention(self) -> bool:
        return self in (PruneMetric.ATTN_MP, PruneMetric.ATTN_CLS)


class DiscardGroup(str, Enum):
    """按强度聚类丢弃的分组：L = C1/C2，H = C4/C5"""

    L = "L"
    H = "H"

    @property
    def clusters(self) -> tuple[int, int]:
        return (1, 2) if self is DiscardGroup.L else (4, 5)


@dataclass(frozen=True)
class ModelConfig:
    """
    默认值是 12 层、窄宽度的桌面规模模型，保证默认剪枝位置 (4, 7, 10) 合法；
    toy() 为测试用的 6 层模型，vit_base() 为 MAC 估算用的 ViT-B 尺寸。
    """

    depth: int = 12
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch_dim: int = 256
    aggregation: Aggregation = Aggregation.MEAN_POOLING
    num_classes: int = 10
    # 位置编码表长度，即最多能处理的 patch 数
    num_patches: int = 512

    @classmethod
    def toy(cls, **overrides: Any) -> "ModelConfig":
        return replace(cls(depth=6), **overrides)

    @classmethod
    def vit_base(cls, **overrides: Any) -> "ModelConfig":
        base = cls(
            depth=12,
            dim=768,
            heads=12,
            aggregation=Aggregation.CLS,
            num_classes=527,
        )
        return replace(base, **overrides)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.dim * self.mlp_ratio

    @property
    def has_cls(self) -> bool:
        return self.aggregation is Aggregation.CLS

    def validate(self) -> list[str]:
        problems = []
        if self.depth < 1:
            problems.append(f"model.depth={self.depth} 必须 >= 1")
        if self.dim < 1:
            problems.append(f"model.dim={self.dim} 必须 >= 1")
        if self.heads < 1:
            problems.append(f"model.heads={self.heads} 必须 >= 1")
        elif self.dim % self.heads != 0:
            problems.append(f"model.dim={self.dim} 不能被 model.heads={self.heads} 整除")
        if self.mlp_ratio < 1:
            problems.append(f"model.mlp_ratio={self.mlp_ratio} 必须 >= 1")
        if self.patch_dim != 256:
            problems.append(f"model.patch_dim={self.patch_dim} 必须为 256 (16×16)")
        if self.num_classes < 1:
            problems.append(f"model.num_classes={self.num_classes} 必须 >= 1")
        if self.num_patches < 1:
            problems.append(f"model.num_patches={self.num_patches} 必须 >= 1")
        return problems


DEFAULT_PRUNE_LOCATIONS = (4, 7, 10)


@dataclass(frozen=True)
class PruneConfig:
    # 1-based 的剪枝 block 编号，所有位置使用同一个 keep-rate
    locations: tuple[int, ...] = DEFAULT_PRUNE_LOCATIONS
    keep_rate: float = 1.0
    metric: PruneMetric = PruneMetric.ATTN_MP

    @classmethod
    def disabled(cls) -> "PruneConfig":
        return cls(locations=())

    def validate(self, model: Optional[ModelConfig] = None) -> list[str]:
        problems = []
        if not 0.0 < self.keep_rate <= 1.0:
            problems.append(f"prune.keep_rate={self.keep_rate} 必须在 (0, 1] 内")
        if len(set(self.locations)) != len(self.locations):
            problems.append(f"prune.locations={list(self.locations)} 含重复位置")
        if model is not None:
            bad = [b for b in self.locations if not 1 <= b <= model.depth]
            if bad:
                problems.append(f"prune.locations 中的 {bad} 超出 [1, {model.depth}]")
            if self.metric is PruneMetric.ATTN_CLS and not model.has_cls:
                problems.append("prune.metric=attn-cls 需要 model.aggregation=cls")
        return problems


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    # None 表示自动：帧数向上取整到 128 的倍数（1 s/5 s/10 s → 128/512/1024 帧）
    target_frames: Optional[int] = None
    norm_mean: float = -4.2677
    norm_std: float = 4.5690

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def validate(self) -> list[str]:
        problems = []
        if self.sample_rate <= 0:
            problems.append(f"frontend.sample_rate={self.sample_rate} 必须 > 0")
        if self.win_length < 2 or self.hop_length < 1:
            problems.append("frontend.win_ms / hop_ms 过小")
        if self.n_mels != 128:
            problems.append(f"frontend.n_mels={self.n_mels} 必须为 128")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            problems.append(f"frontend.fmin/fmax=({self.fmin}, {self.fmax}) 不合法")
        if self.log_floor <= 0:
            problems.append(f"frontend.log_floor={self.log_floor} 必须 > 0")
        if self.target_frames is not None and (
            not isinstance(self.target_frames, int)
            or self.target_frames <= 0
            or self.target_frames % 16 != 0
        ):
            problems.append(f"frontend.target_frames={self.target_frames} 必须是 16 的正整数倍")
        if self.norm_std <= 0:
            problems.append(f"frontend.norm_std={self.norm_std} 必须 > 0")
        return problems


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    weights: Optional[Path] = None
    inputs: list[Path] = field(default_factory=list)
    out_dir: Optional[Path] = None
    seed: int = 0
    jobs: int = 1

    def validate(self, require_weights: bool = False, require_inputs: bool = False) -> list[str]:
        problems = self.model.validate()
        problems += self.prune.validate(self.model)
        problems += self.frontend.validate()
        if self.model.num_patches < self.frontend_max_tokens():
            problems.append(
                f"model.num_patches={self.model.num_patches} 小于前端产生的 token 数 "
                f"{self.frontend_max_tokens()}"
            )
        if self.jobs < 1:
            problems.append(f"jobs={self.jobs} 必须 >= 1")
        if self.seed < 0:
            problems.append(f"seed={self.seed} 必须 >= 0")
        if require_weights and self.weights is None:
            problems.append("weights 未指定")
        if require_inputs and not self.inputs:
            problems.append("inputs 为空")
        return problems

    def frontend_max_tokens(self) -> int:
        if self.frontend.target_frames is None:
            return 0
        return (self.frontend.target_frames // 16) * (self.frontend.n_mels // 16)

    def ensure_valid(self, require_weights: bool = False, require_inputs: bool = False) -> "RunConfig":
        problems = self.validate(require_weights, require_inputs)
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        problems: list[str] = []
        model = _build(ModelConfig, data.get("model", {}), "model", problems)
        prune = _build(PruneConfig, data.get("prune", {}), "prune", problems)
        frontend = _build(FrontendConfig, data.get("frontend", {}), "frontend", problems)
        known = {"model", "prune", "frontend", "weights", "inputs", "out_dir", "seed", "jobs"}
        for key in sorted(set(data) - known):
            problems.append(f"未知配置项 {key}")
        if problems:
            raise ConfigError(problems)
        return cls(
            model=model,
            prune=prune,
            frontend=frontend,
            weights=Path(data["weights"]) if data.get("weights") else None,
            inputs=[Path(p) for p in data.get("inputs", [])],
            out_dir=Path(data["out_dir"]) if data.get("out_dir") else None,
            seed=int(data.get("seed", 0)),
            jobs=int(data.get("jobs", 1)),
        )

    @classmethod
    def from_json(cls, path: Path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([f"配置文件 JSON 解析失败: {e}"]) from e
        if not isinstance(data, dict):
            raise ConfigError(["配置文件顶层必须是对象"])
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        """完整解析后的配置，写入 run_manifest.json"""
        return {
            "model": _plain(asdict(self.model)),
            "prune": _plain(asdict(self.prune)),
            "frontend": _plain(asdict(self.frontend)),
            "weights": str(self.weights) if self.weights else None,
            "inputs": [str(p) for p in self.inputs],
            "out_dir": str(self.out_dir) if self.out_dir else None,
            "seed": self.seed,
            "jobs": self.jobs,
        }


def parse_prune_config(data: dict[str, Any]) -> PruneConfig:
    """解析 {"locations":[4,7,10],"keep_rate":0.5,"metric":"attn-mp"}"""
    problems: list[str] = []
    prune = _build(PruneConfig, data, "prune", problems)
    if problems:
        raise ConfigError(problems)
    return prune


def parse_locations(text: str) -> tuple[int, ...]:
    """解析命令行的 "4,7,10"，空串表示不剪枝"""
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigError([f"prune.locations 无法解析: {text!r}"]) from e


_ENUM_FIELDS = {
    "aggregation": Aggregation,
    "metric": PruneMetric,
}


def _build(cls, data: Any, section: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{section} 必须是对象")
        return cls()
    defaults = {f.name: f.default for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in defaults:
            problems.append(f"{section}.{key} 是未知字段")
            continue
        default = defaults[key]
        if isinstance(default, (int, float)) and not isinstance(default, (bool, Enum)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{section}.{key}={value!r} 必须是数值")
                continue
            if isinstance(default, int) and not isinstance(value, int):
                problems.append(f"{section}.{key}={value!r} 必须是整数")
                continue
        enum_cls = _ENUM_FIELDS.get(key)
        if enum_cls is not None:
            try:
                value = enum_cls(value)
            except ValueError:
                allowed = ", ".join(m.value for m in enum_cls)
                problems.append(f"{section}.{key}={value!r} 不在 {{{allowed}}} 中")
                continue
        elif key == "locations":
            if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                problems.append(f"{section}.locations 必须是整数列表")
                continue
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        problems.append(f"{section}: {e}")
        return cls()


def _plain(data: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for key, value in data.items():
        if isinstance(value, Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out
