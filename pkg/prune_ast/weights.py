"""
模型权重持久化与玩具权重生成

TPWT 文件布局（全部小端）：
    magic "TPWT" | version u32 | entry_count u32
    每个条目: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank | float32 × prod(dims)
条目按名称排序写入，因此同一模型两次保存的字节完全相同。
"""

import logging
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from prune_ast import WEIGHT_FORMAT_VERSION
from prune_ast.config import ModelConfig
from prune_ast.errors import (
    BadMagicError,
    TruncatedPayloadError,
    VersionMismatchError,
    WeightFileError,
    WeightFormatError,
    WeightShapeError,
)


logger = logging.getLogger(__name__)

MAGIC = b"TPWT"
HEADER = struct.Struct("<4sII")
U32 = struct.Struct("<I")
# 防止损坏的 rank 字段导致巨大的分配
MAX_RANK = 8

Weights = dict[str, np.ndarray]


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """由 ModelConfig 推导出的完整张量清单"""
    d, hidden = cfg.dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
        "norm.weight": (d,),
        "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes),
        "head.bias": (cfg.num_classes,),
    }
    if cfg.has_cls:
        shapes["cls_token"] = (d,)
        shapes["cls_pos"] = (d,)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        shapes.update(
            {
                f"{p}.norm1.weight": (d,),
                f"{p}.norm1.bias": (d,),
                f"{p}.qkv.weight": (d, 3 * d),
                f"{p}.qkv.bias": (3 * d,),
                f"{p}.proj.weight": (d, d),
                f"{p}.proj.bias": (d,),
                f"{p}.norm2.weight": (d,),
                f"{p}.norm2.bias": (d,),
                f"{p}.fc1.weight": (d, hidden),
                f"{p}.fc1.bias": (hidden,),
                f"{p}.fc2.weight": (hidden, d),
                f"{p}.fc2.bias": (d,),
            }
        )
    return shapes


# ---- PRNG ----

_MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """返回 (新状态, 输出)"""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256StarStar:
    """
    xoshiro256** 生成器，按公开的更新规则实现，种子由 splitmix64 展开

    与实现语言无关：其他语言按同样的规则即可逐位复现玩具权重。
    """

    def __init__(self, seed: int):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, value = splitmix64(sm)
            s.append(value)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def next_double(self) -> float:
        """[0, 1) 上的 53 位均匀分布"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def truncated_normal(self, count: int, sigma: float, clip: float = 2.0) -> np.ndarray:
        """
        截断正态采样：Box-Muller 成对生成标准正态，丢弃 |z| > clip 的样本，再乘以 sigma
        """
        out = np.empty(count, dtype=np.float64)
        filled = 0
        while filled < count:
            u1 = self.next_double()
            u2 = self.next_double()
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            theta = 2.0 * math.pi * u2
            for z in (r * math.cos(theta), r * math.sin(theta)):
                if abs(z) <= clip and filled < count:
                    out[filled] = z
                    filled += 1
        return (out * sigma).astype(np.float32)


def random_init(cfg: ModelConfig, seed: int = 0, sigma: float = 0.02) -> Weights:
    """
    投影、位置编码与 CLS 用截断正态 (σ, ±2σ)，偏置为 0，LayerNorm 权重为 1

    按名称排序依次消耗同一个生成器，相同 seed 得到逐位相同的权重。
    """
    rng = Xoshiro256StarStar(seed)
    weights: Weights = {}
    for name, shape in sorted(expected_shapes(cfg).items()):
        size = int(np.prod(shape))
        if name.endswith(".bias"):
            tensor = np.zeros(size, dtype=np.float32)
        elif name.startswith("norm") or ".norm" in name:
            tensor = np.ones(size, dtype=np.float32)
        else:
            tensor = rng.truncated_normal(size, sigma)
        weights[name] = tensor.reshape(shape)
    logger.debug("生成玩具权重: %d 个张量, seed=%d", len(weights), seed)
    return weights


# ---- 读写 ----


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [HEADER.pack(MAGIC, WEIGHT_FORMAT_VERSION, len(weights))]
    for name in sorted(weights):
        tensor = np.ascontiguousarray(weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(U32.pack(tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())
    return b"".join(parts)


def save_weights(weights: Mapping[str, np.ndarray], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_weights(weights))
    logger.info("权重已保存: %s (%d 个张量)", path, len(weights))


def decode_tensors(buf: bytes) -> Weights:
    """解析 TPWT 字节串；任何损坏都报告为 WeightFileError 的子类"""
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError(f"文件长度 {len(buf)} 小于头部长度 {HEADER.size}")
    magic, version, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"magic 应为 {MAGIC!r}，实际为 {magic!r}")
    if version != WEIGHT_FORMAT_VERSION:
        raise VersionMismatchError(f"格式版本 {version} 不受支持（期望 {WEIGHT_FORMAT_VERSION}）")

    offset = HEADER.size
    tensors: Weights = {}

    def take(size: int, what: str) -> int:
        nonlocal offset
        if size < 0 or offset + size > len(buf):
            raise TruncatedPayloadError(f"读取 {what} 时数据截断（偏移 {offset}，需要 {size} 字节）")
        start = offset
        offset += size
        return start

    for index in range(count):
        (name_len,) = U32.unpack_from(buf, take(4, f"条目 {index} 名称长度"))
        start = take(name_len, f"条目 {index} 名称")
        try:
            name = buf[start : start + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError(f"条目 {index} 的名称不是合法 UTF-8") from e
        if name in tensors:
            raise WeightFormatError(f"条目名重复: {name}")
        (rank,) = U32.unpack_from(buf, take(4, f"{name} 的 rank"))
        if rank > MAX_RANK:
            raise WeightFormatError(f"{name} 的 rank={rank} 超过上限 {MAX_RANK}")
        dims = struct.unpack_from(f"<{rank}I", buf, take(4 * rank, f"{name} 的维度"))
        size = math.prod(dims)
        start = take(4 * size, f"{name} 的数据")
        if size == 0:
            tensors[name] = np.zeros(dims, dtype=np.float32)
            continue
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=start)
        tensors[name] = data.astype(np.float32).reshape(dims)

    if offset != len(buf):
        raise WeightFormatError(f"文件末尾有 {len(buf) - offset} 字节多余数据")
    return tensors


def read_tensors(path: Path) -> Weights:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise WeightFileError(f"无法读取 {path}: {e}") from e
    return decode_tensors(buf)


def validate_weights(tensors: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    shapes = expected_shapes(cfg)
    for name in sorted(set(shapes) | set(tensors)):
        expected = shapes.get(name)
        actual = tensors[name].shape if name in tensors else None
        if expected != actual:
            raise WeightShapeError(name, expected, actual)


def load_weights(path: Path, cfg: ModelConfig) -> Weights:
    """读取并按 ModelConfig 推导的形状逐一校验"""
    tensors = read_tensors(path)
    validate_weights(tensors, cfg)
    logger.info("权重已加载: %s (%d 个张量)", path, len(tensors))
    return tensors
