"""
结构化异常

所有异常都继承自 PruneAstError，并携带 exit_code，CLI 据此返回稳定的退出码：
0 成功，1 用法/配置错误，2 I/O 错误，3 数值失败。
"""

from typing import Iterable, Sequence


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


class PruneAstError(Exception):
    """所有 prune-ast 异常的基类"""

    exit_code = EXIT_CONFIG


# ---- 配置 ----


class ConfigError(PruneAstError):
    """配置校验失败，violations 列出每一个不合法的字段"""

    exit_code = EXIT_CONFIG

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("配置不合法: " + "; ".join(self.violations))


# ---- I/O ----


class AudioError(PruneAstError):
    exit_code = EXIT_IO


class WavHeaderError(AudioError):
    """RIFF/WAVE 头损坏"""


class UnsupportedCodecError(AudioError):
    """不是 PCM 16-bit"""


class EmptyPayloadError(AudioError):
    """音频数据为空"""


class SampleRateError(AudioError):
    """采样率与前端配置不一致（不做重采样）"""


class WaveformTooShortError(AudioError):
    """波形短于一个 STFT 窗口"""


class SpectrogramShapeError(AudioError):
    """频谱形状无法切分为 16×16 patch"""


class NonFiniteInputError(AudioError):
    """导入的频谱含 NaN 或 Inf"""


class WeightFileError(PruneAstError):
    exit_code = EXIT_IO


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedPayloadError(WeightFileError):
    pass


class WeightFormatError(WeightFileError):
    """条目名重复、名称非 UTF-8 等结构问题"""


class WeightShapeError(WeightFileError):
    """条目形状与 ModelConfig 推导的形状不一致，entry 为出错的条目名"""

    def __init__(self, entry: str, expected: Sequence[int] | None, actual: Sequence[int] | None):
        self.entry = entry
        self.expected = None if expected is None else tuple(expected)
        self.actual = None if actual is None else tuple(actual)
        if expected is None:
            message = f"权重文件包含未知条目 {entry}"
        elif actual is None:
            message = f"权重文件缺少条目 {entry}，期望形状 {self.expected}"
        else:
            message = f"条目 {entry} 形状不匹配: 期望 {self.expected}，实际 {self.actual}"
        super().__init__(message)


class TraceFormatError(PruneAstError):
    """注意力日志 / 剪枝轨迹文件不符合约定格式"""

    exit_code = EXIT_IO


# ---- 数值 ----


class NumericalError(PruneAstError):
    exit_code = EXIT_NUMERICAL


class NonFiniteError(NumericalError):
    """前向过程中出现 NaN 或 Inf，stage 指出首次出现的位置"""

    def __init__(self, stage: str, count: int):
        self.stage = stage
        self.count = count
        super().__init__(f"{stage}: 出现 {count} 个非有限值")


class ShapeError(NumericalError):
    """矩阵维度不匹配，消息中给出两个形状"""

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: 形状不匹配 {self.shape_a} 与 {self.shape_b}")


class TopKRangeError(NumericalError):
    def __init__(self, k: int, n: int):
        self.k = k
        self.n = n
        super().__init__(f"k={k} 超出范围 [1, {n}]")


class PruningError(NumericalError):
    pass


class EmptyTokenSetError(PruningError):
    pass


class EmptySurvivorError(PruningError):
    """分组丢弃后没有任何 token 存活"""


class MissingScoreInputError(PruningError):
    """剪枝指标所需的输入（注意力或 patch 统计量）缺失"""


class MissingClsError(PruningError):
    """需要 CLS token 但当前状态没有"""


class AggregationMismatchError(NumericalError):
    """聚合方式与 token 状态不一致（cls 模式却没有 CLS，或反之）"""


class AnalysisError(NumericalError):
    pass


class ClusterError(AnalysisError):
    pass


class MissingGammaCellsError(AnalysisError):
    """Γ 所需的 γ(b, i) 单元缺失，cells 列出缺失的 (block, cluster)"""

    def __init__(self, group: int, cells: Iterable[tuple[int, int]]):
        self.group = group
        self.cells = sorted(cells)
        super().__init__(f"G{group} 缺少 γ 单元: {self.cells}")
