"""
基础数值内核

Matrix 即二维、行主序的 float32 numpy 数组。所有内核都是纯函数：相同输入得到逐位相同的输出。
"""

import math

import numpy as np
import numpy.typing as npt
from scipy.special import erf

from prune_ast.errors import EmptyTokenSetError, ShapeError, TopKRangeError


Matrix = npt.NDArray[np.float32]
Vector = npt.NDArray[np.float32]

DTYPE = np.float32


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """把任意数组转为连续的 float32 二维矩阵，可选地校验形状"""
    m = np.ascontiguousarray(data, dtype=DTYPE)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError("as_matrix", m.shape, (rows or -1, cols or -1))
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError("as_matrix", m.shape, (rows, cols))
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return np.matmul(a, b, dtype=DTYPE)


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """批量矩阵乘 (B, n, k) × (B, k, m)，用于多头注意力"""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    return np.matmul(a, b, dtype=DTYPE)


def linear(x: Matrix, weight: Matrix, bias: Vector | None = None) -> Matrix:
    """x @ weight + bias，weight 形状为 (in, out)"""
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear.bias", bias.shape, (weight.shape[1],))
        out += bias
    return out


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """按最后一维做 softmax，先减去每行最大值保证数值稳定"""
    x = np.asarray(m, dtype=DTYPE) * DTYPE(scale)
    x = x - x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def layer_norm(m: Matrix, gamma: Vector, beta: Vector, eps: float = 1e-6) -> Matrix:
    cols = m.shape[-1]
    if gamma.shape != (cols,):
        raise ShapeError("layer_norm.gamma", gamma.shape, (cols,))
    if beta.shape != (cols,):
        raise ShapeError("layer_norm.beta", beta.shape, (cols,))
    x = np.asarray(m, dtype=DTYPE)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    # 总体方差
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered / np.sqrt(var + DTYPE(eps))
    return (out * gamma + beta).astype(DTYPE, copy=False)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def gelu(m: np.ndarray) -> np.ndarray:
    """精确的误差函数形式 0.5·x·(1 + erf(x/√2))，不是 tanh 近似"""
    x = np.asarray(m, dtype=DTYPE)
    return (DTYPE(0.5) * x * (DTYPE(1.0) + erf(x * DTYPE(_INV_SQRT2)))).astype(DTYPE, copy=False)


def topk_indices(scores, k: int) -> np.ndarray:
    """
    返回最大的 k 个分数的下标

    同分时下标小者优先；结果按下标升序排列，保持 token 的原有顺序。
    """
    values = np.asarray(scores)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise TopKRangeError(k, n)
    # 稳定排序降序：对取负的值做 stable argsort
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])


def keep_count(n: int, keep_rate: float) -> int:
    """
    保留数 ceil(n·kr)，至少为 1

    先把乘积舍入到 9 位小数，避免 58·0.9 = 52.2000…01 之类的浮点误差多进一位。
    """
    if n < 1:
        raise EmptyTokenSetError(f"token 数为 {n}，无法计算保留数")
    return max(1, math.ceil(round(n * keep_rate, 9)))
