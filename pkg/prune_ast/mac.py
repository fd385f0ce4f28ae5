"""
MAC 估算

只统计稠密矩阵乘的乘加次数（与常见 profiler 的约定一致），不计偏置、LN、softmax、GELU。
每个 block：
    注意力  QKV 3nD² + QKᵀ n²D + AV n²D + 输出投影 nD² = 4nD² + 2n²D
    MLP     2·n·D·(mlp_ratio·D)
剪枝 block 的注意力在 n 个 token 上运行，MLP 在剪枝后的 ceil(n·kr) 个 token 上运行。
cls 模型的 CLS token 计入 n。
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from prune_ast.config import ModelConfig, PruneConfig
from prune_ast.errors import ConfigError
from prune_ast.tensor import keep_count


GIGA = 1e9
TABLE_KEEP_RATES = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
TABLE_TOKEN_COUNTS = (64, 256, 512)


def token_count_schedule(n: int, keep_rate: float, locations: Iterable[int], depth: int) -> list[int]:
    """进入每个 block 的 token 数（不含 CLS），下标 0 对应 block 1"""
    if n < 1:
        raise ConfigError([f"N={n} 必须 >= 1"])
    locations = set(locations)
    counts = []
    for block in range(1, depth + 1):
        counts.append(n)
        if block in locations:
            n = keep_count(n, keep_rate)
    return counts


def attention_macs(n: int, cfg: ModelConfig) -> int:
    d = cfg.dim
    return 4 * n * d * d + 2 * n * n * d


def mlp_macs(n: int, cfg: ModelConfig) -> int:
    return 2 * n * cfg.dim * cfg.hidden_dim


def block_macs(n: int, cfg: ModelConfig, n_mlp: Optional[int] = None) -> int:
    if n < 1:
        raise ConfigError([f"block token 数 n={n} 必须 >= 1"])
    return attention_macs(n, cfg) + mlp_macs(n if n_mlp is None else n_mlp, cfg)


@dataclass(frozen=True)
class BlockCost:
    block: int
    attn_tokens: int
    mlp_tokens: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    n_patches: int
    keep_rate: float
    locations: tuple[int, ...]
    patch_embed_macs: int
    head_macs: int
    blocks: tuple[BlockCost, ...]

    @property
    def token_counts(self) -> list[int]:
        return [b.attn_tokens for b in self.blocks]

    @property
    def block_total(self) -> int:
        return sum(b.macs for b in self.blocks)

    @property
    def total(self) -> int:
        return self.patch_embed_macs + self.block_total + self.head_macs

    @property
    def total_g(self) -> float:
        return round(self.total / GIGA, 1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "block": [b.block for b in self.blocks],
                "attn_tokens": [b.attn_tokens for b in self.blocks],
                "mlp_tokens": [b.mlp_tokens for b in self.blocks],
                "macs": [b.macs for b in self.blocks],
            }
        )


def total_macs(
    n_patches: int,
    keep_rate: float,
    cfg: ModelConfig,
    prune_cfg: PruneConfig = PruneConfig(),
) -> CostReport:
    """prune_cfg 提供剪枝位置，keep_rate 以参数为准"""
    if not 0.0 < keep_rate <= 1.0:
        raise ConfigError([f"keep_rate={keep_rate} 必须在 (0, 1] 内"])
    cls_tokens = int(cfg.has_cls)
    counts = token_count_schedule(n_patches, keep_rate, prune_cfg.locations, cfg.depth)
    blocks = []
    for block, n in enumerate(counts, start=1):
        n_mlp = keep_count(n, keep_rate) if block in prune_cfg.locations else n
        blocks.append(
            BlockCost(
                block=block,
                attn_tokens=n + cls_tokens,
                mlp_tokens=n_mlp + cls_tokens,
                macs=block_macs(n + cls_tokens, cfg, n_mlp + cls_tokens),
            )
        )
    return CostReport(
        n_patches=n_patches,
        keep_rate=keep_rate,
        locations=tuple(sorted(prune_cfg.locations)),
        patch_embed_macs=n_patches * cfg.patch_dim * cfg.dim,
        head_macs=cfg.dim * cfg.num_classes,
        blocks=tuple(blocks),
    )


def mac_ratio(
    n_patches: int,
    keep_rate: float,
    cfg: ModelConfig,
    locations: Sequence[int] = PruneConfig().locations,
) -> float:
    """剪枝后与不剪枝的总 MAC 之比"""
    prune_cfg = PruneConfig(locations=tuple(locations))
    return total_macs(n_patches, keep_rate, cfg, prune_cfg).total / total_macs(n_patches, 1.0, cfg, prune_cfg).total


def keep_rate_for_mac_ratio(
    n_patches: int,
    target: float,
    cfg: ModelConfig,
    locations: Sequence[int] = PruneConfig().locations,
    candidates: Optional[Sequence[float]] = None,
) -> float:
    """在候选 keep-rate 中找 MAC 比例最接近 target 的一个（同样接近时取较大的 keep-rate）"""
    if candidates is None:
        candidates = np.round(np.arange(0.1, 1.0001, 0.01), 2)
    best = None
    for kr in sorted(candidates, reverse=True):
        distance = abs(mac_ratio(n_patches, float(kr), cfg, locations) - target)
        if best is None or distance < best[0]:
            best = (distance, float(kr))
    if best is None:
        raise ConfigError(["候选 keep-rate 为空"])
    return best[1]


def mac_table(
    token_counts: Sequence[int] = TABLE_TOKEN_COUNTS,
    keep_rates: Sequence[float] = TABLE_KEEP_RATES,
    cfg: Optional[ModelConfig] = None,
    prune_cfg: PruneConfig = PruneConfig(),
    with_ratio: bool = False,
) -> pd.DataFrame:
    """N,keep_rate,total_G[,mac_ratio]，默认按 ViT-B 计算"""
    cfg = cfg or ModelConfig.vit_base()
    rows = []
    for n in token_counts:
        baseline = total_macs(n, 1.0, cfg, prune_cfg).total
        for kr in keep_rates:
            report = total_macs(n, kr, cfg, prune_cfg)
            row = {"N": n, "keep_rate": kr, "total_G": report.total_g}
            if with_ratio:
                row["mac_ratio"] = round(report.total / baseline, 4)
            rows.append(row)
    return pd.DataFrame(rows)
