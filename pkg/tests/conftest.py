"""测试共用的小模型、随机 patch 网格与 WAV 生成工具"""

from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from prune_ast.config import Aggregation, ModelConfig
from prune_ast.frontend import PatchGrid, patch_stats
from prune_ast.model import ModelWeights
from prune_ast.weights import expected_shapes


def numpy_tensors(cfg: ModelConfig, seed: int = 0, sigma: float = 0.02) -> dict[str, np.ndarray]:
    """用 numpy 快速生成与 random_init 同布局的权重（测试专用，不追求跨语言可复现）"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(expected_shapes(cfg).items()):
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name.startswith("norm") or ".norm" in name:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * sigma).astype(np.float32)
    return tensors


def zero_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in expected_shapes(cfg).items()}


def make_grid(n_time: int, n_freq: int = 8, seed: int = 0, content_frames: int | None = None) -> PatchGrid:
    rng = np.random.default_rng(seed)
    n = n_time * n_freq
    return PatchGrid(
        patches=rng.standard_normal((n, 16, 16)).astype(np.float32),
        n_time=n_time,
        n_freq=n_freq,
        content_frames=n_time * 16 if content_frames is None else content_frames,
    )


def write_wav(path: Path, samples: np.ndarray, sample_rate: int = 16000) -> Path:
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)
    return path


def noise(seconds: float, seed: int = 0, sample_rate: int = 16000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, int(seconds * sample_rate))


SMALL = ModelConfig.toy(dim=32, heads=4, num_patches=64)
SMALL_CLS = ModelConfig.toy(dim=32, heads=4, num_patches=64, aggregation=Aggregation.CLS)
# 12 层，可以使用默认剪枝位置 (4, 7, 10)
DEEP = ModelConfig(dim=16, heads=2, num_patches=512)


@pytest.fixture(scope="session")
def small_weights() -> ModelWeights:
    return ModelWeights.from_tensors(numpy_tensors(SMALL, seed=1), SMALL)


@pytest.fixture(scope="session")
def small_cls_weights() -> ModelWeights:
    return ModelWeights.from_tensors(numpy_tensors(SMALL_CLS, seed=2), SMALL_CLS)


@pytest.fixture(scope="session")
def deep_weights() -> ModelWeights:
    return ModelWeights.from_tensors(numpy_tensors(DEEP, seed=3), DEEP)


@pytest.fixture
def grid_and_stats():
    grid = make_grid(4, seed=7)
    return grid, patch_stats(grid)
