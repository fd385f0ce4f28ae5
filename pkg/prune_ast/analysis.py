"""
轨迹分析

输入是 trace 子命令写出的目录（每个输入一组 <stem>.trace.json / <stem>.attn.csv / <stem>.patches.csv），
输出都是可直接绘图的 CSV / JSON：
    一维 K-means 聚类（按 patch 均值或标准差）
    聚类 Kendall τ（有序对逐一判定）
    保留/剪枝注意力比 γ 与分组平均 Γ
    (mean, std) 二维保留直方图、保留 token 均值的 CDF、每个 patch 被剪掉的 block
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from prune_ast.errors import AnalysisError, ClusterError, MissingGammaCellsError, TraceFormatError
from prune_ast.frontend import PATCH, PatchStats
from prune_ast.trace import LOG_COLUMNS, AttentionLog, PruneTrace


logger = logging.getLogger(__name__)

N_CLUSTERS = 5
MAX_ITER = 300
FEATURES = ("mean", "std")


# ---- 聚类 ----


@dataclass(frozen=True)
class ClusterModel:
    """升序质心；boundaries 为相邻质心的中点，落在中点上的值归入较小的簇"""

    centroids: np.ndarray
    boundaries: np.ndarray
    feature: str
    shares: np.ndarray

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, values) -> np.ndarray:
        """1-based 簇编号"""
        return np.searchsorted(self.boundaries, np.asarray(values, dtype=np.float64), side="left") + 1

    def wcss(self, values) -> float:
        v = np.asarray(values, dtype=np.float64)
        return float(((v - self.centroids[self.assign(v) - 1]) ** 2).sum())

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "k": self.k,
            "centroids": [float(c) for c in self.centroids],
            "boundaries": [float(b) for b in self.boundaries],
            "shares_percent": [float(s) for s in self.shares],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterModel":
        try:
            centroids = np.asarray(data["centroids"], dtype=np.float64)
            return cls(
                centroids=centroids,
                boundaries=_midpoints(centroids),
                feature=str(data["feature"]),
                shares=np.asarray(data.get("shares_percent", np.zeros(len(centroids))), dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ClusterError(f"聚类模型格式不合法: {e}") from e


def assign_cluster(cm: ClusterModel, value: float) -> int:
    return int(cm.assign([value])[0])


def _midpoints(centroids: np.ndarray) -> np.ndarray:
    return (centroids[:-1] + centroids[1:]) / 2.0


def _lloyd(values: np.ndarray, weights: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    """在去重后的加权数据上迭代，直到分配不变或达到 MAX_ITER"""
    labels = None
    for _ in range(MAX_ITER):
        new_labels = np.searchsorted(_midpoints(centroids), values, side="left")
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums = np.bincount(labels, weights=values * weights, minlength=len(centroids))
        counts = np.bincount(labels, weights=weights, minlength=len(centroids))
        # 空簇保留原质心
        centroids = np.sort(np.where(counts > 0, sums / np.maximum(counts, 1), centroids))
    labels = np.searchsorted(_midpoints(centroids), values, side="left")
    wcss = float((weights * (values - centroids[labels]) ** 2).sum())
    return centroids, wcss


def kmeans_1d(
    values,
    k: int = N_CLUSTERS,
    seed: Optional[int] = None,
    feature: str = "mean",
    restarts: int = 0,
) -> ClusterModel:
    """
    一维 Lloyd K-means

    初始质心取去重排序后数据的 k 个分位中点 u[⌊(j+½)·m/k⌋]，结果完全确定。
    restarts > 0 时额外用 seed 随机初始化若干次，取簇内平方和最小者。
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    unique, counts = np.unique(v, return_counts=True)
    m = len(unique)
    if k < 1 or m < k:
        raise ClusterError(f"需要至少 {k} 个不同的值，实际只有 {m} 个")
    weights = counts.astype(np.float64)

    init = unique[((np.arange(k) + 0.5) * m / k).astype(np.int64)]
    centroids, best = _lloyd(unique, weights, init)
    if restarts > 0:
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            candidate, wcss = _lloyd(unique, weights, np.sort(rng.choice(unique, size=k, replace=False)))
            if wcss < best:
                centroids, best = candidate, wcss

    if np.any(np.diff(centroids) <= 0):
        raise ClusterError(f"聚类质心未严格递增: {centroids}")
    labels = np.searchsorted(_midpoints(centroids), unique, side="left")
    shares = np.bincount(labels, weights=weights, minlength=k) / weights.sum() * 100.0
    logger.debug("K-means(%s): 质心 %s", feature, np.round(centroids, 4))
    return ClusterModel(centroids=centroids, boundaries=_midpoints(centroids), feature=feature, shares=shares)


# ---- Kendall τ ----


def kendall_tau_clustered(cluster_ids, scores) -> float:
    """
    对全部 n(n−1) 个有序对 (i, j) 判定：
    (C_i ≤ C_j 且 a_i ≤ a_j) 或 (C_i > C_j 且 a_i > a_j) 为一致对，否则为不一致对。
    τ = (#一致 − #不一致) / n(n−1)

    按簇分层用二分查找计数，复杂度 O(k·n log n)。
    """
    c = np.asarray(cluster_ids)
    a = np.asarray(scores, dtype=np.float64)
    if c.shape != a.shape or c.ndim != 1:
        raise AnalysisError(f"簇编号与分数长度不一致: {c.shape} vs {a.shape}")
    n = len(a)
    if n < 2:
        raise AnalysisError(f"至少需要 2 个 token，实际 {n} 个")

    concordant = 0
    for level in np.unique(c):
        members = a[c == level]
        at_or_above = np.sort(a[c >= level])
        below = np.sort(a[c < level])
        # j 满足 C_j ≥ C_i 且 a_j ≥ a_i（包含 j = i 自身）
        concordant += int((len(at_or_above) - np.searchsorted(at_or_above, members, side="left")).sum())
        # j 满足 C_j < C_i 且 a_j < a_i
        concordant += int(np.searchsorted(below, members, side="left").sum())
    concordant -= n
    pairs = n * (n - 1)
    return (concordant - (pairs - concordant)) / pairs


# ---- 轨迹目录 ----


@dataclass
class SampleTrace:
    """单个输入的全部轨迹数据"""

    stem: str
    trace: PruneTrace
    log: pd.DataFrame
    stats: PatchStats

    def feature(self, name: str) -> np.ndarray:
        return self.stats.feature(name)

    def block_log(self, block: int) -> pd.DataFrame:
        return self.log[self.log["block"] == block]


def stats_from_frame(frame: pd.DataFrame, trace: PruneTrace) -> PatchStats:
    """由 patches.csv 与轨迹中的网格信息还原 PatchStats"""
    missing = [c for c in ("patch_index", "mean", "std") if c not in frame.columns]
    if missing:
        raise TraceFormatError(f"patch 统计缺少列: {missing}")
    frame = frame.sort_values("patch_index")
    if not np.array_equal(frame["patch_index"].to_numpy(), np.arange(trace.n_tokens)):
        raise TraceFormatError(f"patch 统计应覆盖 0..{trace.n_tokens - 1} 的全部 patch")
    time_index = np.arange(trace.n_tokens) // trace.n_freq
    return PatchStats(
        mean=frame["mean"].to_numpy(dtype=np.float64),
        std=frame["std"].to_numpy(dtype=np.float64),
        padding=time_index * PATCH >= trace.content_frames,
        n_time=trace.n_time,
        n_freq=trace.n_freq,
    )


def trace_paths(directory: Path, stem: str) -> tuple[Path, Path, Path]:
    return (
        directory / f"{stem}.trace.json",
        directory / f"{stem}.attn.csv",
        directory / f"{stem}.patches.csv",
    )


def load_sample(directory: Path, stem: str) -> SampleTrace:
    trace_file, log_file, patches_file = trace_paths(directory, stem)
    trace = PruneTrace.read_json(trace_file)
    log = AttentionLog.read_csv(log_file).to_frame()
    try:
        patches = pd.read_csv(patches_file)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TraceFormatError(f"无法读取 patch 统计 {patches_file}: {e}") from e
    stats = stats_from_frame(patches, trace)
    if len(log) and int(log["provenance"].max()) >= trace.n_tokens:
        raise TraceFormatError(f"{log_file}: provenance 超出 [0, {trace.n_tokens})")
    return SampleTrace(stem=stem, trace=trace, log=log[LOG_COLUMNS], stats=stats)


def load_trace_dir(directory: Path) -> list[SampleTrace]:
    """按 stem 排序载入目录中的全部样本"""
    directory = Path(directory)
    stems = sorted(p.name[: -len(".trace.json")] for p in directory.glob("*.trace.json"))
    if not stems:
        raise TraceFormatError(f"{directory} 中没有 *.trace.json")
    return [load_sample(directory, stem) for stem in stems]


def fit_clusters(
    samples: Sequence[SampleTrace],
    feature: str = "mean",
    exclude_padding: bool = False,
) -> ClusterModel:
    """在所有样本的 patch 统计量上拟合聚类"""
    if feature not in FEATURES:
        raise AnalysisError(f"未知的特征 {feature}，可选 {FEATURES}")
    parts = []
    for s in samples:
        values = s.feature(feature)
        parts.append(values[~s.stats.padding] if exclude_padding else values)
    return kmeans_1d(np.concatenate(parts) if parts else np.array([]), feature=feature)


# ---- τ 报告 ----


def correlation_report(samples: Sequence[SampleTrace], cm: ClusterModel) -> pd.DataFrame:
    """每个 block 上，各样本的 τ(簇编号, 注意力分数) 的平均，block=0 行为所有 block 的平均"""
    per_block: dict[int, list[float]] = {}
    for s in samples:
        feature = s.feature(cm.feature)
        for block, chunk in s.log.groupby("block", sort=True):
            if len(chunk) < 2:
                continue
            clusters = cm.assign(feature[chunk["provenance"].to_numpy()])
            per_block.setdefault(int(block), []).append(
                kendall_tau_clustered(clusters, chunk["score"].to_numpy())
            )
    if not per_block:
        raise AnalysisError("没有可计算 τ 的 block")
    blocks = sorted(per_block)
    taus = [float(np.mean(per_block[b])) for b in blocks]
    frame = pd.DataFrame({"block": blocks, "tau": taus})
    average = pd.DataFrame({"block": [0], "tau": [float(np.mean(taus))]})
    return pd.concat([frame, average], ignore_index=True)


# ---- γ / Γ ----


def block_groups(locations: Iterable[int]) -> dict[int, tuple[int, ...]]:
    """剪枝位置 (4, 7, 10) → G1=(1..4), G2=(5..7), G3=(8..10)；每组末尾的 block 即该组的剪枝位置"""
    groups = {}
    previous = 0
    for n, location in enumerate(sorted(locations), start=1):
        groups[n] = tuple(range(previous + 1, location + 1))
        previous = location
    return groups


@dataclass
class _RatioCell:
    retained_sum: float = 0.0
    retained_count: int = 0
    pruned_sum: float = 0.0
    pruned_count: int = 0

    def value(self) -> Optional[float]:
        if self.retained_count == 0 or self.pruned_count == 0:
            return None
        pruned_mean = self.pruned_sum / self.pruned_count
        if pruned_mean == 0:
            return None
        return (self.retained_sum / self.retained_count) / pruned_mean


def _ratio_cells(samples: Sequence[SampleTrace], cm: ClusterModel) -> dict[tuple[int, int], _RatioCell]:
    cells: dict[tuple[int, int], _RatioCell] = {}
    for s in samples:
        feature = s.feature(cm.feature)
        for location_blocks in block_groups(s.trace.locations).values():
            step = s.trace.step_at(location_blocks[-1])
            if step is None:
                continue
            for block in location_blocks:
                chunk = s.block_log(block)
                provenance = chunk["provenance"].to_numpy()
                scores = chunk["score"].to_numpy()
                retained = np.isin(provenance, step.retained)
                pruned = np.isin(provenance, step.pruned)
                clusters = cm.assign(feature[provenance])
                for i in range(1, cm.k + 1):
                    cell = cells.setdefault((block, i), _RatioCell())
                    mask = retained & (clusters == i)
                    cell.retained_sum += float(scores[mask].sum())
                    cell.retained_count += int(mask.sum())
                    cell.pruned_sum += float(scores[pruned].sum())
                    cell.pruned_count += int(pruned.sum())
    return cells


def gamma(samples: Sequence[SampleTrace], cm: ClusterModel, block: int, cluster: int) -> Optional[float]:
    """
    γ(b, i) = E[block b 上簇 i 中保留 token 的分数] / E[block b 上在本组剪枝位置被剪掉的 token 的分数]

    期望在所有样本的全部 token 上合并计算（比值的分子分母各自求均值）。缺失时返回 None。
    """
    cell = _ratio_cells(samples, cm).get((block, cluster))
    return None if cell is None else cell.value()


@dataclass
class RatioReport:
    gamma: pd.DataFrame
    groups: dict[int, tuple[int, ...]]
    k: int = N_CLUSTERS

    def cell(self, block: int, cluster: int) -> Optional[float]:
        row = self.gamma[(self.gamma["block"] == block) & (self.gamma["cluster"] == cluster)]
        if row.empty or pd.isna(row["gamma"].iloc[0]):
            return None
        return float(row["gamma"].iloc[0])


def gamma_table(samples: Sequence[SampleTrace], cm: ClusterModel) -> RatioReport:
    if not samples:
        raise AnalysisError("没有样本")
    locations = samples[0].trace.locations
    if any(s.trace.locations != locations for s in samples):
        raise AnalysisError("样本的剪枝位置不一致，无法合并计算 γ")
    cells = _ratio_cells(samples, cm)
    rows = [
        {"block": block, "cluster": cluster, "gamma": cells[(block, cluster)].value()}
        for block, cluster in sorted(cells)
    ]
    frame = pd.DataFrame(rows, columns=["block", "cluster", "gamma"])
    return RatioReport(gamma=frame, groups=block_groups(locations), k=cm.k)


def gamma_group(report: RatioReport, n: int) -> float:
    """Γ(n) = Σ_i Σ_j γ(G_n[j], i) / (k·|G_n|)，任何缺失单元都会报错"""
    if n not in report.groups:
        raise MissingGammaCellsError(n, [])
    total = 0.0
    missing = []
    for block in report.groups[n]:
        for cluster in range(1, report.k + 1):
            value = report.cell(block, cluster)
            if value is None:
                missing.append((block, cluster))
            else:
                total += value
    if missing:
        raise MissingGammaCellsError(n, missing)
    return total / (report.k * len(report.groups[n]))


def gamma_group_frame(report: RatioReport) -> pd.DataFrame:
    """可计算的组写出数值，缺失单元的组跳过并记录警告"""
    rows = []
    for n in sorted(report.groups):
        try:
            rows.append({"group": n, "Gamma": gamma_group(report, n)})
        except MissingGammaCellsError as e:
            logger.warning("%s", e)
    return pd.DataFrame(rows, columns=["group", "Gamma"])


# ---- 直方图 / CDF / 保留统计 ----


@dataclass
class Histogram2D:
    mean_edges: np.ndarray
    std_edges: np.ndarray
    input_counts: np.ndarray
    retained_counts: np.ndarray

    @staticmethod
    def _lognorm(counts: np.ndarray) -> np.ndarray:
        peak = counts.max() if counts.size else 0
        if peak == 0:
            return np.zeros(counts.shape, dtype=np.float64)
        return np.log1p(counts) / np.log1p(peak)

    def frame(self, view: str) -> pd.DataFrame:
        """mean_bin,std_bin,lognorm（以及原始计数），行数为 bins²"""
        counts = self.input_counts if view == "input" else self.retained_counts
        bins_mean, bins_std = counts.shape
        mean_bin, std_bin = np.meshgrid(np.arange(bins_mean), np.arange(bins_std), indexing="ij")
        return pd.DataFrame(
            {
                "mean_bin": mean_bin.ravel(),
                "std_bin": std_bin.ravel(),
                "count": counts.ravel().astype(np.int64),
                "lognorm": self._lognorm(counts).ravel(),
            }
        )


def _retained_mask(s: SampleTrace) -> np.ndarray:
    mask = np.zeros(s.trace.n_tokens, dtype=bool)
    mask[s.trace.final_retained()] = True
    return mask


def retention_histogram2d(
    samples: Sequence[SampleTrace],
    bins: int = 50,
    exclude_padding: bool = False,
) -> Histogram2D:
    """(mean, std) 二维计数：全部输入 patch 与最后一个剪枝 block 后存活的 patch，共用同一组边界"""
    if bins < 1:
        raise AnalysisError(f"bins={bins} 必须 >= 1")
    means, stds, kept = [], [], []
    for s in samples:
        keep = ~s.stats.padding if exclude_padding else np.ones(s.trace.n_tokens, dtype=bool)
        means.append(s.stats.mean[keep])
        stds.append(s.stats.std[keep])
        kept.append(_retained_mask(s)[keep])
    mean = np.concatenate(means) if means else np.array([])
    std = np.concatenate(stds) if stds else np.array([])
    retained = np.concatenate(kept) if kept else np.array([], dtype=bool)

    value_range = [_span(mean), _span(std)]
    input_counts, mean_edges, std_edges = np.histogram2d(mean, std, bins=bins, range=value_range)
    retained_counts, _, _ = np.histogram2d(mean[retained], std[retained], bins=[mean_edges, std_edges])
    return Histogram2D(
        mean_edges=mean_edges,
        std_edges=std_edges,
        input_counts=input_counts.astype(np.int64),
        retained_counts=retained_counts.astype(np.int64),
    )


def _span(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return (0.0, 1.0)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return (lo - 0.5, hi + 0.5)
    return (lo, hi)


@dataclass
class CdfCurve:
    values: np.ndarray
    fractions: np.ndarray
    boundaries: Optional[np.ndarray] = None

    def evaluate(self, x: float) -> float:
        """经验 CDF：≤ x 的保留 token 比例"""
        index = np.searchsorted(self.values, x, side="right")
        return 0.0 if index == 0 else float(self.fractions[index - 1])

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"mean": self.values, "cum_fraction": self.fractions})


def retention_cdf(samples: Sequence[SampleTrace], cm: Optional[ClusterModel] = None) -> CdfCurve:
    """保留 token 的 patch 均值的经验 CDF，附带聚类边界"""
    retained = [s.stats.mean[s.trace.final_retained()] for s in samples]
    values = np.concatenate(retained) if retained else np.array([])
    if values.size == 0:
        raise AnalysisError("没有保留的 token，无法计算 CDF")
    unique, counts = np.unique(values, return_counts=True)
    fractions = np.cumsum(counts) / values.size
    return CdfCurve(
        values=unique,
        fractions=fractions,
        boundaries=None if cm is None else cm.boundaries.copy(),
    )


def cluster_retention(samples: Sequence[SampleTrace], cm: ClusterModel) -> pd.DataFrame:
    """每个簇的输入 patch 数、最终保留数与保留比例"""
    input_counts = np.zeros(cm.k, dtype=np.int64)
    retained_counts = np.zeros(cm.k, dtype=np.int64)
    for s in samples:
        clusters = cm.assign(s.feature(cm.feature))
        input_counts += np.bincount(clusters - 1, minlength=cm.k)
        retained_counts += np.bincount(clusters[s.trace.final_retained()] - 1, minlength=cm.k)
    share = np.divide(
        retained_counts, input_counts, out=np.zeros(cm.k, dtype=np.float64), where=input_counts > 0
    )
    return pd.DataFrame(
        {
            "cluster": np.arange(1, cm.k + 1),
            "input_count": input_counts,
            "retained_count": retained_counts,
            "retained_share": share,
        }
    )


def retention_map(trace: PruneTrace) -> pd.DataFrame:
    """patch_index,time_idx,freq_idx,pruned_at；pruned_at 为 0 表示一直存活"""
    index = np.arange(trace.n_tokens)
    return pd.DataFrame(
        {
            "patch_index": index,
            "time_idx": index // trace.n_freq,
            "freq_idx": index % trace.n_freq,
            "pruned_at": trace.pruned_at(),
        }
    )


# ---- 报告写出 ----


ANALYSIS_MODES = ("tau", "gamma", "hist", "cdf", "cluster", "map")


def write_clusters_json(cm: ClusterModel, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cm.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def run_analysis(
    trace_dir: Path,
    mode: str,
    out_dir: Path,
    feature: str = "mean",
    bins: int = 50,
    exclude_padding: bool = False,
) -> list[Path]:
    """按 mode 计算并写出报告，返回写出的文件列表"""
    if mode not in ANALYSIS_MODES:
        raise AnalysisError(f"未知的分析模式 {mode}，可选 {ANALYSIS_MODES}")
    samples = load_trace_dir(trace_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def save(frame: pd.DataFrame, name: str) -> None:
        path = out_dir / name
        frame.to_csv(path, index=False)
        written.append(path)

    if mode == "map":
        for s in samples:
            save(retention_map(s.trace), f"retention_map_{s.stem}.csv")
        return written
    if mode == "hist":
        hist = retention_histogram2d(samples, bins=bins, exclude_padding=exclude_padding)
        save(hist.frame("input"), "hist2d_input.csv")
        save(hist.frame("retained"), "hist2d_retained.csv")
        return written

    cm = fit_clusters(samples, feature=feature, exclude_padding=exclude_padding)
    clusters_path = out_dir / "clusters.json"
    write_clusters_json(cm, clusters_path)
    written.append(clusters_path)
    if mode == "tau":
        save(correlation_report(samples, cm), "tau_report.csv")
    elif mode == "gamma":
        report = gamma_table(samples, cm)
        save(report.gamma, "gamma_report.csv")
        save(gamma_group_frame(report), "Gamma_report.csv")
    elif mode == "cdf":
        save(retention_cdf(samples, cm).frame(), "cdf.csv")
    elif mode == "cluster":
        save(cluster_retention(samples, cm), "cluster_retention.csv")
    logger.info("分析 %s 完成: %d 个样本, %d 个文件", mode, len(samples), len(written))
    return written
