"""
音频前端

PCM → 对数 Mel 频谱 → 补齐/截断 → 归一化 → 16×16 patch 切分 → patch 统计量（均值/标准差）。
参数默认值见 FrontendConfig：16 kHz、25 ms Hann 窗、10 ms 帧移、128 个 HTK Mel 滤波器、对数下限 1e-10。
"""

import logging
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import librosa
import numpy as np
import pandas as pd
from scipy.io import wavfile

from prune_ast.config import FrontendConfig
from prune_ast.errors import (
    ConfigError,
    EmptyPayloadError,
    NonFiniteInputError,
    SampleRateError,
    SpectrogramShapeError,
    UnsupportedCodecError,
    WavHeaderError,
    WaveformTooShortError,
)
from prune_ast.tensor import DTYPE


logger = logging.getLogger(__name__)

PATCH = 16
PCM16_SCALE = 32768.0
N_MELS = 128


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    # (frames, bins) 的对数幅度，时间轴在前
    values: np.ndarray
    log_floor_value: float
    norm_mean: Optional[float] = None
    norm_std: Optional[float] = None
    # pad_or_trim 之前的有效帧数，之后的帧都是补齐的下限帧
    valid_frames: Optional[int] = None

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def content_frames(self) -> int:
        return self.frames if self.valid_frames is None else min(self.valid_frames, self.frames)


@dataclass(frozen=True)
class PatchGrid:
    # (N, 16, 16)，按时间优先、频率其次的顺序，下标即 provenance
    patches: np.ndarray
    n_time: int
    n_freq: int
    content_frames: int

    @property
    def n_tokens(self) -> int:
        return self.n_time * self.n_freq

    def time_index(self) -> np.ndarray:
        return np.arange(self.n_tokens) // self.n_freq

    def freq_index(self) -> np.ndarray:
        return np.arange(self.n_tokens) % self.n_freq

    def padding_mask(self) -> np.ndarray:
        """16 帧全部落在补齐区域内的 patch 视为 padding"""
        return self.time_index() * PATCH >= self.content_frames

    def flattened(self) -> np.ndarray:
        return self.patches.reshape(self.n_tokens, PATCH * PATCH)


@dataclass(frozen=True)
class PatchStats:
    mean: np.ndarray
    std: np.ndarray
    padding: np.ndarray
    n_time: int
    n_freq: int

    @property
    def n_tokens(self) -> int:
        return len(self.mean)

    def feature(self, name: str) -> np.ndarray:
        if name == "mean":
            return self.mean
        if name == "std":
            return self.std
        raise ValueError(f"未知的 patch 统计量: {name}")


# ---- WAV ----


def load_wav(path: Path) -> Waveform:
    """
    读取 RIFF/WAVE PCM16 文件

    立体声按均值下混，样本按 1/32768 缩放到 [-1, 1]。
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise WavHeaderError(f"{path} 不是 RIFF/WAVE 文件")

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as e:
        message = str(e)
        lowered = message.lower()
        if ("unknown" in lowered and "format" in lowered) or "bit depth" in lowered:
            raise UnsupportedCodecError(f"{path}: {message}") from e
        raise WavHeaderError(f"{path}: {message}") from e
    except (EOFError, OSError, struct.error) as e:
        raise WavHeaderError(f"{path}: {e}") from e

    if data.dtype != np.int16:
        raise UnsupportedCodecError(f"{path}: 只支持 PCM 16-bit，实际为 {data.dtype}")
    if data.size == 0:
        raise EmptyPayloadError(f"{path}: 音频数据为空")

    samples = data.astype(np.float64) / PCM16_SCALE
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    logger.debug("读取 %s: %d 个样本, %d Hz", path, len(samples), rate)
    return Waveform(samples=samples.astype(DTYPE), sample_rate=int(rate))


# ---- Mel ----


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) 的 HTK 三角滤波器组，不做面积归一化"""
    with warnings.catch_warnings():
        # 128 个滤波器在 40 Hz 频率分辨率下低频段会出现空滤波器
        warnings.simplefilter("ignore", UserWarning)
        return librosa.filters.mel(
            sr=cfg.sample_rate,
            n_fft=cfg.win_length,
            n_mels=cfg.n_mels,
            fmin=cfg.fmin,
            fmax=cfg.fmax,
            htk=True,
            norm=None,
            dtype=np.float64,
        )


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """各 Mel 滤波器的中心频率 (Hz)"""
    return librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=cfg.fmin, fmax=cfg.fmax, htk=True)[1:-1]


def compute_log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise SampleRateError(f"采样率 {w.sample_rate} Hz 与配置的 {cfg.sample_rate} Hz 不一致")
    if len(w.samples) < cfg.win_length:
        raise WaveformTooShortError(
            f"波形长度 {len(w.samples)} 短于一个窗口 ({cfg.win_length} 个样本)"
        )

    y = np.asarray(w.samples, dtype=np.float64)
    spec = librosa.stft(
        y,
        n_fft=cfg.win_length,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        window="hann",
        center=False,
    )
    power = np.abs(spec) ** 2
    mel = mel_filterbank(cfg) @ power
    log_mel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(
        values=np.ascontiguousarray(log_mel.T, dtype=DTYPE),
        log_floor_value=float(np.log(cfg.log_floor)),
    )


def auto_target_frames(frames: int) -> int:
    """帧数向上取整到 128 的倍数"""
    return max(128, -(-frames // 128) * 128)


def pad_or_trim(m: MelSpectrogram, target_frames: int) -> MelSpectrogram:
    if target_frames <= 0 or target_frames % PATCH != 0:
        raise SpectrogramShapeError(f"target_frames={target_frames} 不是 16 的正整数倍")
    values = m.values
    content = m.content_frames
    if m.frames >= target_frames:
        values = values[:target_frames]
    else:
        fill = np.full((target_frames - m.frames, m.bins), m.log_floor_value, dtype=DTYPE)
        values = np.concatenate([values, fill], axis=0)
    return replace(
        m,
        values=np.ascontiguousarray(values, dtype=DTYPE),
        valid_frames=min(content, target_frames),
    )


def normalize(m: MelSpectrogram, mean: float, std: float) -> MelSpectrogram:
    """(x - mean) / (2·std)"""
    if std <= 0:
        raise ConfigError([f"归一化标准差必须 > 0，实际为 {std}"])
    values = ((m.values.astype(np.float64) - mean) / (2.0 * std)).astype(DTYPE)
    return replace(m, values=values, norm_mean=float(mean), norm_std=float(std))


def denormalize(m: MelSpectrogram) -> MelSpectrogram:
    if m.norm_mean is None or m.norm_std is None:
        return m
    values = (m.values.astype(np.float64) * (2.0 * m.norm_std) + m.norm_mean).astype(DTYPE)
    return replace(m, values=values, norm_mean=None, norm_std=None)


# ---- patch ----


def patchify(m: MelSpectrogram) -> PatchGrid:
    frames, bins = m.values.shape
    if frames == 0 or frames % PATCH != 0 or bins != N_MELS:
        raise SpectrogramShapeError(f"频谱形状 {frames}×{bins} 不能切分为 16×16 patch")
    n_time, n_freq = frames // PATCH, bins // PATCH
    patches = (
        m.values.reshape(n_time, PATCH, n_freq, PATCH)
        .transpose(0, 2, 1, 3)
        .reshape(n_time * n_freq, PATCH, PATCH)
    )
    return PatchGrid(
        patches=np.ascontiguousarray(patches, dtype=DTYPE),
        n_time=n_time,
        n_freq=n_freq,
        content_frames=m.content_frames,
    )


def unpatchify(g: PatchGrid) -> np.ndarray:
    return (
        g.patches.reshape(g.n_time, g.n_freq, PATCH, PATCH)
        .transpose(0, 2, 1, 3)
        .reshape(g.n_time * PATCH, g.n_freq * PATCH)
    )


def patch_stats(g: PatchGrid) -> PatchStats:
    """每个 patch 256 个值的算术均值与总体标准差"""
    flat = g.flattened().astype(np.float64)
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    return PatchStats(
        mean=mean,
        std=std,
        padding=g.padding_mask(),
        n_time=g.n_time,
        n_freq=g.n_freq,
    )


def patch_stats_frame(stats: PatchStats) -> pd.DataFrame:
    """patch_index,time_idx,freq_idx,mean,std"""
    index = np.arange(stats.n_tokens)
    return pd.DataFrame(
        {
            "patch_index": index,
            "time_idx": index // stats.n_freq,
            "freq_idx": index % stats.n_freq,
            "mean": stats.mean,
            "std": stats.std,
        }
    )


# ---- 输入装载 ----


SPECTROGRAM_TENSOR = "spectrogram"


def load_spectrogram(path: Path, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    """
    直接导入对数 Mel 频谱（未归一化），绕过音频

    支持 CSV（每行一帧，128 列）或 TPWT 容器中名为 spectrogram 的张量。
    """
    from prune_ast.weights import read_tensors

    path = Path(path)
    if path.suffix.lower() == ".csv":
        values = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    else:
        tensors = read_tensors(path)
        if SPECTROGRAM_TENSOR not in tensors:
            raise SpectrogramShapeError(f"{path} 中没有名为 {SPECTROGRAM_TENSOR} 的张量")
        values = tensors[SPECTROGRAM_TENSOR]
    if values.ndim != 2 or values.shape[1] != cfg.n_mels:
        raise SpectrogramShapeError(f"{path}: 频谱形状 {values.shape} 的第二维必须为 {cfg.n_mels}")
    # 转成 float32 之后再检查，超出范围的值同样变成 Inf
    with np.errstate(over="ignore"):
        values = np.ascontiguousarray(values, dtype=DTYPE)
    bad = int(np.count_nonzero(~np.isfinite(values)))
    if bad:
        raise NonFiniteInputError(f"{path}: 频谱含 {bad} 个 NaN/Inf")
    return MelSpectrogram(
        values=values,
        log_floor_value=float(np.log(cfg.log_floor)),
    )


AUDIO_SUFFIXES = {".wav", ".wave"}


def load_input(path: Path, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    """按后缀选择 WAV 或频谱导入，返回未归一化的对数 Mel 频谱"""
    path = Path(path)
    if path.suffix.lower() in AUDIO_SUFFIXES:
        return compute_log_mel(load_wav(path), cfg)
    return load_spectrogram(path, cfg)


def prepare_spectrogram(mel: MelSpectrogram, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    """补齐/截断到目标帧数后归一化"""
    target = cfg.target_frames or auto_target_frames(mel.frames)
    return normalize(pad_or_trim(mel, target), cfg.norm_mean, cfg.norm_std)


def prepare_input(path: Path, cfg: FrontendConfig = FrontendConfig()) -> tuple[PatchGrid, PatchStats]:
    grid = patchify(prepare_spectrogram(load_input(path, cfg), cfg))
    logger.info("%s: %d 帧 → %d 个 token", Path(path).name, grid.n_time * PATCH, grid.n_tokens)
    return grid, patch_stats(grid)
