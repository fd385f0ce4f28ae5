"""聚类、Kendall τ、γ/Γ、直方图与 CDF 测试"""

import itertools
import json

import numpy as np
import pandas as pd
import pytest

from tests.conftest import SMALL, make_grid


def brute_force_tau(clusters, scores) -> float:
    n = len(scores)
    concordant = discordant = 0
    for i, j in itertools.permutations(range(n), 2):
        ci, cj, ai, aj = clusters[i], clusters[j], scores[i], scores[j]
        if (ci <= cj and ai <= aj) or (ci > cj and ai > aj):
            concordant += 1
        else:
            discordant += 1
    return (concordant - discordant) / (n * (n - 1))


def pairwise_tau(clusters, scores) -> float:
    """brute_force_tau 的矩阵写法，n 到几百仍然很快"""
    c = np.asarray(clusters)
    a = np.asarray(scores, dtype=np.float64)
    n = len(a)
    ci, cj = c[:, None], c[None, :]
    ai, aj = a[:, None], a[None, :]
    concordant = ((ci <= cj) & (ai <= aj)) | ((ci > cj) & (ai > aj))
    # 对角线 i = j 总是一致对
    count = int(concordant.sum()) - n
    pairs = n * (n - 1)
    return (2 * count - pairs) / pairs


def two_cluster_model():
    from prune_ast.analysis import ClusterModel

    return ClusterModel(
        centroids=np.array([0.0, 1.0]),
        boundaries=np.array([0.5]),
        feature="mean",
        shares=np.array([50.0, 50.0]),
    )


def hand_sample(stem: str, means, block1_scores, block2_scores):
    """4 个 token，只在 block 2 剪枝：保留 {0, 1}，剪掉 {2, 3}"""
    from prune_ast.analysis import SampleTrace
    from prune_ast.config import Aggregation, PruneMetric
    from prune_ast.frontend import PatchStats
    from prune_ast.trace import AttentionLog, PruneStep, PruneTrace

    trace = PruneTrace(
        metric=PruneMetric.ATTN_MP,
        keep_rate=0.5,
        locations=(2,),
        aggregation=Aggregation.MEAN_POOLING,
        n_tokens=4,
        n_time=4,
        n_freq=1,
        content_frames=64,
        steps=[
            PruneStep(
                block=2,
                metric=PruneMetric.ATTN_MP,
                retained=np.array([0, 1]),
                pruned=np.array([2, 3]),
                retained_scores=np.asarray(block2_scores[:2]),
                pruned_scores=np.asarray(block2_scores[2:]),
            )
        ],
    )
    log = AttentionLog()
    log.add(1, np.arange(4), np.asarray(block1_scores, dtype=np.float64))
    log.add(2, np.arange(4), np.asarray(block2_scores, dtype=np.float64), np.array([1, 1, 0, 0], dtype=bool))
    stats = PatchStats(
        mean=np.asarray(means, dtype=np.float64),
        std=np.zeros(4),
        padding=np.zeros(4, dtype=bool),
        n_time=4,
        n_freq=1,
    )
    return SampleTrace(stem=stem, trace=trace, log=log.to_frame(), stats=stats)


def chain_sample(stem: str, means, scores: dict, steps: dict, keep_rate: float = 0.5):
    """
    任意长度、任意剪枝位置的样本

    scores[b] 按 provenance 给出 block b 的分数（只记录当时存活的 token），
    steps[b] 为 block b 的保留集合。
    """
    from prune_ast.analysis import SampleTrace
    from prune_ast.config import Aggregation, PruneMetric
    from prune_ast.frontend import PatchStats
    from prune_ast.trace import AttentionLog, PruneStep, PruneTrace

    n = len(means)
    current = np.arange(n)
    log = AttentionLog()
    prune_steps = []
    for block in range(1, max(scores) + 1):
        block_scores = np.asarray(scores[block], dtype=np.float64)
        if block in steps:
            retained = np.asarray(steps[block])
            pruned = np.setdiff1d(current, retained)
            prune_steps.append(
                PruneStep(
                    block=block,
                    metric=PruneMetric.ATTN_MP,
                    retained=retained,
                    pruned=pruned,
                    retained_scores=block_scores[retained],
                    pruned_scores=block_scores[pruned],
                )
            )
            log.add(block, current, block_scores[current], np.isin(current, retained))
            current = retained
        else:
            log.add(block, current, block_scores[current])
    trace = PruneTrace(
        metric=PruneMetric.ATTN_MP,
        keep_rate=keep_rate,
        locations=tuple(sorted(steps)),
        aggregation=Aggregation.MEAN_POOLING,
        n_tokens=n,
        n_time=n,
        n_freq=1,
        content_frames=16 * n,
        steps=prune_steps,
    )
    stats = PatchStats(
        mean=np.asarray(means, dtype=np.float64),
        std=np.zeros(n),
        padding=np.zeros(n, dtype=bool),
        n_time=n,
        n_freq=1,
    )
    return SampleTrace(stem=stem, trace=trace, log=log.to_frame(), stats=stats)


def write_trace_dir(directory, weights, seeds=(0, 1, 2), prune=None):
    """用真实前向生成 trace 目录，文件布局与 trace 子命令一致"""
    from prune_ast.config import PruneConfig
    from prune_ast.frontend import patch_stats, patch_stats_frame
    from prune_ast.model import classify_forward

    prune = prune or PruneConfig(locations=(2, 4), keep_rate=0.5)
    for seed in seeds:
        grid = make_grid(4, seed=seed, content_frames=48)
        stats = patch_stats(grid)
        result = classify_forward(grid, weights, SMALL, prune, stats=stats)
        stem = f"clip{seed}"
        result.log.write_csv(directory / f"{stem}.attn.csv")
        result.trace.write_json(directory / f"{stem}.trace.json")
        patch_stats_frame(stats).to_csv(directory / f"{stem}.patches.csv", index=False)
    return directory


class TestKMeans:
    """一维 K-means"""

    def test_separated_pairs(self):
        from prune_ast.analysis import kmeans_1d

        cm = kmeans_1d([0.0, 0.1, 1.0, 1.1, 2.0, 2.1, 3.0, 3.1, 4.0, 4.1])
        assert cm.k == 5
        assert np.allclose(cm.centroids, [0.05, 1.05, 2.05, 3.05, 4.05])
        assert np.allclose(cm.boundaries, [0.55, 1.55, 2.55, 3.55])
        assert np.allclose(cm.shares, [20.0] * 5)

    def test_sorted_and_deterministic(self):
        from prune_ast.analysis import kmeans_1d

        values = np.random.default_rng(0).normal(size=2000)
        a, b = kmeans_1d(values), kmeans_1d(values)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.all(np.diff(a.centroids) > 0)
        assert a.shares.sum() == pytest.approx(100.0)

    def test_duplicated_data_same_model(self):
        from prune_ast.analysis import kmeans_1d

        values = np.random.default_rng(1).normal(size=500)
        a = kmeans_1d(values)
        b = kmeans_1d(np.concatenate([values, values]))
        assert np.array_equal(a.centroids, b.centroids)

    def test_boundary_goes_to_lower_cluster(self):
        from prune_ast.analysis import assign_cluster

        cm = two_cluster_model()
        assert assign_cluster(cm, 0.5) == 1
        assert assign_cluster(cm, 0.5000001) == 2
        assert cm.assign([-3.0, 0.2, 9.0]).tolist() == [1, 1, 2]

    def test_too_few_values(self):
        from prune_ast.errors import ClusterError
        from prune_ast.analysis import kmeans_1d

        with pytest.raises(ClusterError):
            kmeans_1d([1.0, 1.0, 2.0, 2.0, 3.0, 4.0])

    def test_restarts_never_worse(self):
        from prune_ast.analysis import kmeans_1d

        values = np.concatenate([np.random.default_rng(2).normal(loc, 0.3, 200) for loc in (-4, -1, 0, 3, 8)])
        base = kmeans_1d(values)
        best = kmeans_1d(values, seed=3, restarts=5)
        assert best.wcss(values) <= base.wcss(values) + 1e-9

    def test_dict_round_trip(self):
        from prune_ast.analysis import ClusterModel, kmeans_1d

        cm = kmeans_1d(np.arange(20.0), feature="std")
        back = ClusterModel.from_dict(json.loads(json.dumps(cm.to_dict())))
        assert back.feature == "std"
        assert np.allclose(back.centroids, cm.centroids)
        assert np.allclose(back.boundaries, cm.boundaries)

    def test_bad_dict(self):
        from prune_ast.analysis import ClusterModel
        from prune_ast.errors import ClusterError

        with pytest.raises(ClusterError):
            ClusterModel.from_dict({"feature": "mean"})


class TestKendallTau:
    """聚类 Kendall τ"""

    def test_reversed_is_minus_one(self):
        from prune_ast.analysis import kendall_tau_clustered

        assert kendall_tau_clustered([1, 2, 3], [3.0, 2.0, 1.0]) == -1.0

    def test_aligned_is_one(self):
        from prune_ast.analysis import kendall_tau_clustered

        assert kendall_tau_clustered([1, 2, 3], [1.0, 2.0, 3.0]) == 1.0

    def test_brute_force_oracle(self):
        from prune_ast.analysis import kendall_tau_clustered

        rng = np.random.default_rng(5)
        for trial in range(200):
            n = int(rng.integers(2, 40))
            clusters = rng.integers(1, 6, n)
            if trial % 3 == 0:
                scores = rng.integers(0, 3, n).astype(np.float64)
            else:
                scores = rng.random(n)
            assert kendall_tau_clustered(clusters, scores) == pytest.approx(brute_force_tau(clusters, scores), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 17, 128, 333, 500])
    def test_pairwise_oracle_large(self, n):
        from prune_ast.analysis import kendall_tau_clustered

        rng = np.random.default_rng(n)
        cases = [
            (rng.integers(1, 6, n), rng.random(n)),
            (rng.integers(1, 6, n), rng.integers(0, 4, n).astype(np.float64)),
            # 无并列：簇编号与分数都互不相同
            (rng.permutation(n) + 1, rng.permutation(n) / n),
            # 全部并列
            (np.full(n, 3), np.full(n, 0.25)),
            # 分数全部并列，簇编号不同
            (rng.integers(1, 6, n), np.full(n, 0.5)),
        ]
        for clusters, scores in cases:
            assert kendall_tau_clustered(clusters, scores) == pytest.approx(pairwise_tau(clusters, scores), abs=1e-12)

    def test_oracles_agree(self):
        rng = np.random.default_rng(9)
        clusters, scores = rng.integers(1, 6, 25), rng.integers(0, 3, 25).astype(np.float64)
        assert pairwise_tau(clusters, scores) == pytest.approx(brute_force_tau(clusters, scores), abs=1e-12)

    def test_all_tied_is_one(self):
        from prune_ast.analysis import kendall_tau_clustered

        assert kendall_tau_clustered(np.full(500, 2), np.zeros(500)) == 1.0

    def test_negated_scores_flip_sign(self):
        """簇编号与分数都互不相同时，分数取负使 τ 变号"""
        from prune_ast.analysis import kendall_tau_clustered

        rng = np.random.default_rng(6)
        clusters = rng.permutation(30) + 1
        scores = rng.random(30)
        assert kendall_tau_clustered(clusters, -scores) == pytest.approx(-kendall_tau_clustered(clusters, scores))

    def test_input_errors(self):
        from prune_ast.analysis import kendall_tau_clustered
        from prune_ast.errors import AnalysisError

        with pytest.raises(AnalysisError):
            kendall_tau_clustered([1, 2], [0.5])
        with pytest.raises(AnalysisError):
            kendall_tau_clustered([1], [0.5])


class TestGamma:
    """保留/剪枝注意力比"""

    def test_block_groups(self):
        from prune_ast.analysis import block_groups

        assert block_groups((4, 7, 10)) == {1: (1, 2, 3, 4), 2: (5, 6, 7), 3: (8, 9, 10)}

    def test_hand_case(self):
        from prune_ast.analysis import gamma, gamma_group, gamma_table

        sample = hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        cm = two_cluster_model()
        assert gamma([sample], cm, 1, 1) == pytest.approx(2.0)
        assert gamma([sample], cm, 1, 2) == pytest.approx(1.0)
        assert gamma([sample], cm, 2, 1) == pytest.approx(2.5)
        assert gamma([sample], cm, 2, 2) == pytest.approx(0.5)

        report = gamma_table([sample], cm)
        assert report.groups == {1: (1, 2)}
        assert list(report.gamma.columns) == ["block", "cluster", "gamma"]
        assert gamma_group(report, 1) == pytest.approx((2.0 + 1.0 + 2.5 + 0.5) / 4)

    def test_pooled_over_samples(self):
        """比值的分子与分母分别在全部样本上求均值"""
        from prune_ast.analysis import gamma

        a = hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        b = hand_sample("b", [0.0, 1.0, 0.0, 1.0], [0.9, 0.2, 0.1, 0.1], [0.5, 0.1, 0.2, 0.2])
        assert gamma([a, b], two_cluster_model(), 1, 1) == pytest.approx(0.65 / 0.15)

    def test_missing_cell(self):
        from prune_ast.analysis import gamma, gamma_group, gamma_group_frame, gamma_table
        from prune_ast.errors import MissingGammaCellsError

        # 保留的 token 0、1 都在簇 1，簇 2 没有保留 token
        sample = hand_sample("a", [0.0, 0.0, 1.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        cm = two_cluster_model()
        assert gamma([sample], cm, 1, 2) is None
        report = gamma_table([sample], cm)
        assert report.cell(1, 2) is None
        with pytest.raises(MissingGammaCellsError) as excinfo:
            gamma_group(report, 1)
        assert excinfo.value.cells == [(1, 2), (2, 2)]
        assert gamma_group_frame(report).empty

    def test_unknown_group(self):
        from prune_ast.analysis import gamma_group, gamma_table
        from prune_ast.errors import MissingGammaCellsError

        sample = hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        with pytest.raises(MissingGammaCellsError):
            gamma_group(gamma_table([sample], two_cluster_model()), 2)

    def test_uniform_scores_give_one(self):
        """每个 block 内分数相同时，所有 γ 与 G1/G2/G3 的 Γ 都是 1"""
        from prune_ast.analysis import gamma_group, gamma_table

        means = [0.0, 1.0] * 6
        # 12 → 6 → 3 → 2，两个簇在每个剪枝位置都有保留 token
        steps = {4: list(range(6)), 7: [0, 1, 2], 10: [0, 1]}
        alive = {b: 12 if b <= 4 else 6 if b <= 7 else 3 for b in range(1, 11)}
        scores = {b: np.full(12, 1.0 / alive[b]) for b in range(1, 11)}
        samples = [chain_sample(stem, means, scores, steps) for stem in ("a", "b")]
        samples[0].trace.validate()

        report = gamma_table(samples, two_cluster_model())
        assert report.groups == {1: (1, 2, 3, 4), 2: (5, 6, 7), 3: (8, 9, 10)}
        assert len(report.gamma) == 10 * 2
        assert report.gamma["gamma"].to_numpy() == pytest.approx(np.ones(20), abs=1e-12)
        for n in (1, 2, 3):
            assert gamma_group(report, n) == pytest.approx(1.0, abs=1e-12)

    def test_six_tokens_two_samples(self):
        """簇 1 = {0, 1, 2}，簇 2 = {3, 4, 5}；block 2 保留 {0, 1, 3}"""
        from prune_ast.analysis import gamma, gamma_group, gamma_table

        means = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        steps = {2: [0, 1, 3]}
        a = chain_sample(
            "a",
            means,
            {1: [0.30, 0.10, 0.05, 0.25, 0.20, 0.10], 2: [0.25, 0.15, 0.10, 0.30, 0.12, 0.08]},
            steps,
        )
        b = chain_sample(
            "b",
            means,
            {1: [0.20, 0.20, 0.10, 0.10, 0.30, 0.10], 2: [0.10, 0.30, 0.05, 0.35, 0.15, 0.05]},
            steps,
        )
        cm = two_cluster_model()
        assert gamma([a, b], cm, 1, 1) == pytest.approx(24 / 17, abs=1e-9)
        assert gamma([a, b], cm, 1, 2) == pytest.approx(21 / 17, abs=1e-9)
        assert gamma([a, b], cm, 2, 1) == pytest.approx(24 / 11, abs=1e-9)
        assert gamma([a, b], cm, 2, 2) == pytest.approx(39 / 11, abs=1e-9)
        assert gamma_group(gamma_table([a, b], cm), 1) == pytest.approx(783 / 374, abs=1e-9)


class TestCorrelationReport:
    def test_matches_direct_tau(self):
        from prune_ast.analysis import correlation_report, kendall_tau_clustered

        sample = hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        cm = two_cluster_model()
        report = correlation_report([sample], cm)
        assert report["block"].tolist() == [1, 2, 0]
        tau1 = kendall_tau_clustered([1, 2, 1, 2], [0.4, 0.2, 0.1, 0.3])
        tau2 = kendall_tau_clustered([1, 2, 1, 2], [0.5, 0.1, 0.2, 0.2])
        assert report["tau"].tolist() == pytest.approx([tau1, tau2, (tau1 + tau2) / 2])


class TestRetention:
    """直方图、CDF 与簇保留统计"""

    def test_histogram_counts(self):
        from prune_ast.analysis import retention_histogram2d

        samples = [hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])]
        hist = retention_histogram2d(samples, bins=4)
        assert hist.input_counts.sum() == 4
        assert hist.retained_counts.sum() == 2
        frame = hist.frame("input")
        assert len(frame) == 16
        assert list(frame.columns) == ["mean_bin", "std_bin", "count", "lognorm"]
        assert frame["lognorm"].max() == pytest.approx(1.0)
        assert np.all(hist.retained_counts <= hist.input_counts)

    def test_histogram_exclude_padding(self, tmp_path, small_weights):
        from prune_ast.analysis import load_trace_dir, retention_histogram2d

        samples = load_trace_dir(write_trace_dir(tmp_path, small_weights, seeds=(0,)))
        # content_frames = 48：time_idx = 3 的 8 个 patch 落在补齐区域
        assert int(samples[0].stats.padding.sum()) == 8
        assert retention_histogram2d(samples, bins=10).input_counts.sum() == 32
        assert retention_histogram2d(samples, bins=10, exclude_padding=True).input_counts.sum() == 24

    def test_cdf(self):
        from prune_ast.analysis import retention_cdf

        sample = hand_sample("a", [0.0, 1.0, 0.5, 2.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        curve = retention_cdf([sample], two_cluster_model())
        assert curve.values.tolist() == [0.0, 1.0]
        assert curve.fractions.tolist() == [0.5, 1.0]
        assert curve.evaluate(-1.0) == 0.0
        assert curve.evaluate(0.5) == 0.5
        assert curve.evaluate(5.0) == 1.0
        assert curve.boundaries.tolist() == [0.5]
        assert list(curve.frame().columns) == ["mean", "cum_fraction"]

    def test_cluster_retention(self):
        from prune_ast.analysis import cluster_retention

        sample = hand_sample("a", [0.0, 0.0, 1.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        frame = cluster_retention([sample], two_cluster_model())
        assert frame["input_count"].tolist() == [2, 2]
        assert frame["retained_count"].tolist() == [2, 0]
        assert frame["retained_share"].tolist() == [1.0, 0.0]

    def test_retention_map(self):
        from prune_ast.analysis import retention_map

        sample = hand_sample("a", [0.0, 1.0, 0.0, 1.0], [0.4, 0.2, 0.1, 0.3], [0.5, 0.1, 0.2, 0.2])
        frame = retention_map(sample.trace)
        assert frame["pruned_at"].tolist() == [0, 0, 2, 2]
        assert frame["time_idx"].tolist() == [0, 1, 2, 3]


class TestTraceDirectory:
    """读取 trace 目录并写出报告"""

    def test_load(self, tmp_path, small_weights):
        from prune_ast.analysis import load_trace_dir

        samples = load_trace_dir(write_trace_dir(tmp_path, small_weights))
        assert [s.stem for s in samples] == ["clip0", "clip1", "clip2"]
        assert samples[0].trace.n_tokens == 32
        assert [len(s.retained) for s in samples[0].trace.steps] == [16, 8]
        assert sorted(samples[0].log["block"].unique().tolist()) == list(range(1, 7))

    def test_empty_directory(self, tmp_path):
        from prune_ast.analysis import load_trace_dir
        from prune_ast.errors import TraceFormatError

        with pytest.raises(TraceFormatError):
            load_trace_dir(tmp_path)

    def test_out_of_range_provenance(self, tmp_path, small_weights):
        from prune_ast.analysis import load_trace_dir
        from prune_ast.errors import TraceFormatError

        write_trace_dir(tmp_path, small_weights, seeds=(0,))
        frame = pd.read_csv(tmp_path / "clip0.attn.csv")
        frame.loc[0, "provenance"] = 99
        frame.to_csv(tmp_path / "clip0.attn.csv", index=False)
        with pytest.raises(TraceFormatError):
            load_trace_dir(tmp_path)

    @pytest.mark.parametrize(
        "mode, expected",
        [
            ("tau", ["clusters.json", "tau_report.csv"]),
            ("gamma", ["Gamma_report.csv", "clusters.json", "gamma_report.csv"]),
            ("hist", ["hist2d_input.csv", "hist2d_retained.csv"]),
            ("cdf", ["cdf.csv", "clusters.json"]),
            ("cluster", ["cluster_retention.csv", "clusters.json"]),
            ("map", ["retention_map_clip0.csv", "retention_map_clip1.csv", "retention_map_clip2.csv"]),
        ],
    )
    def test_run_analysis_modes(self, tmp_path, small_weights, mode, expected):
        from prune_ast.analysis import run_analysis

        (tmp_path / "traces").mkdir()
        traces = write_trace_dir(tmp_path / "traces", small_weights)
        written = run_analysis(traces, mode, tmp_path / "out", bins=8)
        assert sorted(p.name for p in written) == sorted(expected)
        for path in written:
            assert path.exists()

    def test_tau_report_shape(self, tmp_path, small_weights):
        from prune_ast.analysis import run_analysis

        (tmp_path / "traces").mkdir()
        write_trace_dir(tmp_path / "traces", small_weights)
        run_analysis(tmp_path / "traces", "tau", tmp_path / "out")
        frame = pd.read_csv(tmp_path / "out" / "tau_report.csv")
        assert frame["block"].tolist() == [1, 2, 3, 4, 5, 6, 0]
        assert frame["tau"].between(-1.0, 1.0).all()
        clusters = json.loads((tmp_path / "out" / "clusters.json").read_text(encoding="utf-8"))
        assert clusters["k"] == 5
        assert clusters["feature"] == "mean"

    def test_unknown_mode(self, tmp_path):
        from prune_ast.analysis import run_analysis
        from prune_ast.errors import AnalysisError

        with pytest.raises(AnalysisError):
            run_analysis(tmp_path, "nope", tmp_path)
