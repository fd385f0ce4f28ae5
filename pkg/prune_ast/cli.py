"""
命令行入口

    prune-ast infer | trace | mac | analyze | ablate | schedule | make-toy-weights | serve

退出码：0 成功，1 用法/配置错误，2 I/O 错误，3 数值失败。
"""

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import click
import numpy as np
import pandas as pd

from prune_ast import TRACE_FORMAT_VERSION, WEIGHT_FORMAT_VERSION, __version__
from prune_ast.analysis import (
    ANALYSIS_MODES,
    FEATURES,
    ClusterModel,
    kmeans_1d,
    run_analysis,
    write_clusters_json,
)
from prune_ast.config import (
    Aggregation,
    DiscardGroup,
    ModelConfig,
    PruneConfig,
    PruneMetric,
    RunConfig,
    parse_locations,
)
from prune_ast.errors import EXIT_CONFIG, EXIT_IO, EXIT_OK, ConfigError, PruneAstError
from prune_ast.frontend import PatchGrid, PatchStats, patch_stats_frame, prepare_input
from prune_ast.log import setup_logging
from prune_ast.mac import TABLE_KEEP_RATES, TABLE_TOKEN_COUNTS, mac_table, total_macs
from prune_ast.model import ForwardResult, ModelWeights, classify_forward
from prune_ast.paths import get_output_dir
from prune_ast.pruning import GroupDiscard, KeepRateSchedule, keep_rate_at_epoch
from prune_ast.weights import load_weights, random_init, save_weights


logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


# ---- 公共参数 ----


def run_options(func):
    """infer / trace / ablate 共用的参数"""
    options = [
        click.argument("inputs", nargs=-1, type=click.Path(path_type=Path)),
        click.option("--config", "config_path", type=click.Path(path_type=Path), help="JSON 配置文件"),
        click.option("--weights", type=click.Path(path_type=Path), help="TPWT 权重文件"),
        click.option("--keep-rate", type=float, help="每个剪枝位置的 keep-rate，(0, 1]"),
        click.option(
            "--metric",
            type=click.Choice([m.value for m in PruneMetric]),
            help="token 重要性指标",
        ),
        click.option("--prune-blocks", help='1-based 剪枝位置，如 "4,7,10"；空串表示不剪枝'),
        click.option(
            "--aggregation",
            type=click.Choice([a.value for a in Aggregation]),
            help="特征聚合方式",
        ),
        click.option("--seed", type=int, help="随机种子：ablate 用于 K-means 重启，infer/trace 只记入清单"),
        click.option("--jobs", type=int, help="并行处理的输入数"),
        click.option("--out-dir", type=click.Path(path_type=Path), help="输出目录"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_run_config(
    config_path: Optional[Path] = None,
    weights: Optional[Path] = None,
    keep_rate: Optional[float] = None,
    metric: Optional[str] = None,
    prune_blocks: Optional[str] = None,
    aggregation: Optional[str] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    out_dir: Optional[Path] = None,
    inputs: Sequence[Path] = (),
) -> RunConfig:
    """配置文件打底，命令行参数覆盖"""
    run = RunConfig.from_json(config_path) if config_path else RunConfig()
    prune = run.prune
    if keep_rate is not None:
        prune = replace(prune, keep_rate=keep_rate)
    if metric is not None:
        prune = replace(prune, metric=PruneMetric(metric))
    if prune_blocks is not None:
        prune = replace(prune, locations=parse_locations(prune_blocks))
    model = run.model
    if aggregation is not None:
        model = replace(model, aggregation=Aggregation(aggregation))
    return replace(
        run,
        model=model,
        prune=prune,
        weights=weights if weights is not None else run.weights,
        seed=seed if seed is not None else run.seed,
        jobs=jobs if jobs is not None else run.jobs,
        out_dir=out_dir if out_dir is not None else (run.out_dir or get_output_dir()),
        inputs=list(inputs) if inputs else run.inputs,
    )


def check_unique_stems(inputs: Sequence[Path]) -> None:
    stems = [Path(p).stem for p in inputs]
    duplicated = sorted({s for s in stems if stems.count(s) > 1})
    if duplicated:
        raise ConfigError([f"输入文件名重复（输出按文件名命名）: {duplicated}"])


def parallel_map(func: Callable[[T], R], items: Sequence[T], jobs: int) -> list[R]:
    """结果按输入顺序返回，与 jobs 无关"""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def load_model(run: RunConfig) -> ModelWeights:
    return ModelWeights.from_tensors(load_weights(run.weights, run.model), run.model)


def run_input(
    path: Path,
    run: RunConfig,
    weights: ModelWeights,
    discard: Optional[GroupDiscard] = None,
) -> tuple[PatchGrid, PatchStats, ForwardResult]:
    grid, stats = prepare_input(path, run.frontend)
    result = classify_forward(grid, weights, run.model, run.prune, stats=stats, discard=discard)
    return grid, stats, result


def logits_frame(inputs: Sequence[Path], results: Sequence[ForwardResult]) -> pd.DataFrame:
    rows = []
    for path, result in zip(inputs, results):
        row = {"input": Path(path).name, "n_tokens": result.trace.n_tokens}
        row.update({f"logit_{i}": float(v) for i, v in enumerate(result.logits)})
        rows.append(row)
    return pd.DataFrame(rows)


MANIFEST_EXCLUDED = ("jobs", "out_dir")
# ablate 现场拟合聚类时的随机重启次数，由 --seed 决定
ABLATE_KMEANS_RESTARTS = 8


def write_manifest(out_dir: Path, command: str, run: RunConfig, outputs: Sequence[Path]) -> Path:
    """
    完整解析后的配置与格式版本

    不含时间戳，也不含 jobs 与 out_dir：并行度和输出位置不影响结果，
    换一个 --jobs 或输出目录重跑得到逐字节相同的清单。
    """
    config = run.to_dict()
    for key in MANIFEST_EXCLUDED:
        config.pop(key)
    manifest = {
        "command": command,
        "version": __version__,
        "weight_format_version": WEIGHT_FORMAT_VERSION,
        "trace_format_version": TRACE_FORMAT_VERSION,
        "config": config,
        "outputs": sorted(Path(p).name for p in outputs),
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def prepare_run(run: RunConfig) -> tuple[RunConfig, ModelWeights]:
    run.ensure_valid(require_weights=True, require_inputs=True)
    check_unique_stems(run.inputs)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    return run, load_model(run)


# ---- 命令 ----


@click.group()
@click.version_option(version=__version__, prog_name="prune-ast")
def cli():
    """音频频谱 Transformer 的 TopK token 剪枝推理与分析工具"""
    setup_logging()


@cli.command()
@run_options
def infer(inputs, config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir):
    """推理：写出 logits.csv 与 mac.csv"""
    run, model = prepare_run(
        resolve_run_config(config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir, inputs)
    )
    outcomes = parallel_map(lambda p: run_input(p, run, model), run.inputs, run.jobs)
    results = [r for _, _, r in outcomes]

    logits_path = run.out_dir / "logits.csv"
    logits_frame(run.inputs, results).to_csv(logits_path, index=False)

    mac_rows = []
    for path, (grid, _, _) in zip(run.inputs, outcomes):
        report = total_macs(grid.n_tokens, run.prune.keep_rate, run.model, run.prune)
        mac_rows.append(
            {
                "input": Path(path).name,
                "N": grid.n_tokens,
                "keep_rate": run.prune.keep_rate,
                "total_G": report.total_g,
                "total_macs": report.total,
            }
        )
    mac_path = run.out_dir / "mac.csv"
    pd.DataFrame(mac_rows).to_csv(mac_path, index=False)

    write_manifest(run.out_dir, "infer", run, [logits_path, mac_path])
    for path, grid in zip(run.inputs, (g for g, _, _ in outcomes)):
        click.echo(f"{Path(path).name}: {grid.n_tokens} tokens")


@cli.command()
@run_options
def trace(inputs, config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir):
    """为每个输入写出 <stem>.attn.csv、<stem>.trace.json、<stem>.patches.csv"""
    run, model = prepare_run(
        resolve_run_config(config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir, inputs)
    )

    def process(path: Path) -> list[Path]:
        _, stats, result = run_input(path, run, model)
        stem = Path(path).stem
        written = [
            run.out_dir / f"{stem}.attn.csv",
            run.out_dir / f"{stem}.trace.json",
            run.out_dir / f"{stem}.patches.csv",
        ]
        result.log.write_csv(written[0])
        result.trace.write_json(written[1])
        patch_stats_frame(stats).to_csv(written[2], index=False)
        return written

    outputs = [p for paths in parallel_map(process, run.inputs, run.jobs) for p in paths]
    write_manifest(run.out_dir, "trace", run, outputs)
    click.echo(f"写出 {len(run.inputs)} 组轨迹到 {run.out_dir}")


@cli.command()
@click.option("--tokens", default=",".join(str(n) for n in TABLE_TOKEN_COUNTS), help="token 数 N 列表")
@click.option("--keep-rates", default=",".join(str(k) for k in TABLE_KEEP_RATES), help="keep-rate 列表")
@click.option("--prune-blocks", default="4,7,10", help="剪枝位置")
@click.option("--preset", type=click.Choice(["vit-base", "config"]), default="vit-base", help="模型尺寸")
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="preset=config 时读取其中的 model 段")
@click.option("--ratio", is_flag=True, help="附加相对不剪枝的 MAC 比例列")
@click.option("--out-dir", type=click.Path(path_type=Path), help="同时写出 mac.csv")
def mac(tokens, keep_rates, prune_blocks, preset, config_path, ratio, out_dir):
    """按 N,keep_rate,total_G 打印 MAC 表"""
    cfg = ModelConfig.vit_base()
    if preset == "config":
        if config_path is None:
            raise ConfigError(["preset=config 需要 --config"])
        cfg = RunConfig.from_json(config_path).model
    prune = PruneConfig(locations=parse_locations(prune_blocks))
    problems = cfg.validate() + prune.validate(cfg)
    token_counts = _parse_numbers(tokens, int, "tokens")
    rates = _parse_numbers(keep_rates, float, "keep-rates")
    problems += [f"keep_rate={k} 必须在 (0, 1] 内" for k in rates if not 0.0 < k <= 1.0]
    problems += [f"N={n} 必须 >= 1" for n in token_counts if n < 1]
    if problems:
        raise ConfigError(problems)
    table = mac_table(token_counts, rates, cfg, prune, with_ratio=ratio)
    click.echo(table.to_csv(index=False), nl=False)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "mac.csv", index=False)


def _parse_numbers(text: str, kind, name: str) -> list:
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError([f"--{name} 无法解析: {text!r}"]) from e


@cli.command()
@click.argument("trace_dir", type=click.Path(path_type=Path))
@click.option("--mode", type=click.Choice(ANALYSIS_MODES), required=True, help="分析类型")
@click.option("--feature", type=click.Choice(FEATURES), default="mean", help="聚类所用的 patch 统计量")
@click.option("--bins", type=int, default=50, help="二维直方图每一维的 bin 数")
@click.option("--exclude-padding", is_flag=True, help="忽略补齐帧产生的 patch")
@click.option("--out-dir", type=click.Path(path_type=Path), help="输出目录，默认为 TRACE_DIR")
def analyze(trace_dir, mode, feature, bins, exclude_padding, out_dir):
    """读取 trace 目录并写出对应的 CSV/JSON 报告"""
    written = run_analysis(trace_dir, mode, out_dir or trace_dir, feature=feature, bins=bins, exclude_padding=exclude_padding)
    for path in written:
        click.echo(str(path))


@cli.command()
@run_options
@click.option("--group", type=click.Choice([g.value for g in DiscardGroup]), required=True, help="L = C1/C2，H = C4/C5")
@click.option("--block", "at_block", type=int, required=True, help="在该 block 结束后丢弃")
@click.option("--clusters", "clusters_path", type=click.Path(path_type=Path), help="clusters.json；缺省时由输入现场拟合")
def ablate(inputs, config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir, group, at_block, clusters_path):
    """分组丢弃消融：写出 logits.csv 与 survivors.csv"""
    run = resolve_run_config(config_path, weights, keep_rate, metric, prune_blocks, aggregation, seed, jobs, out_dir, inputs)
    if not 1 <= at_block <= run.model.depth:
        raise ConfigError([f"--block={at_block} 超出 [1, {run.model.depth}]"])
    run, model = prepare_run(run)

    prepared = parallel_map(lambda p: prepare_input(p, run.frontend), run.inputs, run.jobs)
    if clusters_path is not None:
        try:
            with open(clusters_path, "r", encoding="utf-8") as f:
                cm = ClusterModel.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError([f"{clusters_path} 不是合法 JSON: {e}"]) from e
    else:
        values = np.concatenate([stats.mean for _, stats in prepared])
        cm = kmeans_1d(values, feature="mean", seed=run.seed, restarts=ABLATE_KMEANS_RESTARTS)
        write_clusters_json(cm, run.out_dir / "clusters.json")
    discard = GroupDiscard(cluster_model=cm, group=DiscardGroup(group), at_block=at_block)

    def process(item: tuple[PatchGrid, PatchStats]) -> ForwardResult:
        grid, stats = item
        return classify_forward(grid, model, run.model, run.prune, stats=stats, discard=discard)

    results = parallel_map(process, prepared, run.jobs)
    logits_path = run.out_dir / "logits.csv"
    logits_frame(run.inputs, results).to_csv(logits_path, index=False)

    rows = []
    for path, (_, stats), result in zip(run.inputs, prepared, results):
        clusters = cm.assign(stats.mean)
        survived = cm.assign(stats.mean[result.survivors])
        for cluster in range(1, cm.k + 1):
            rows.append(
                {
                    "input": Path(path).name,
                    "cluster": cluster,
                    "input_count": int((clusters == cluster).sum()),
                    "survivor_count": int((survived == cluster).sum()),
                }
            )
    survivors_path = run.out_dir / "survivors.csv"
    pd.DataFrame(rows).to_csv(survivors_path, index=False)
    write_manifest(run.out_dir, "ablate", run, [logits_path, survivors_path])


@cli.command()
@click.option("--start", "start_epoch", type=int, required=True, help="开始衰减的 epoch")
@click.option("--duration", "duration_epochs", type=int, required=True, help="衰减持续的 epoch 数")
@click.option("--target", "target_kr", type=float, required=True, help="最终 keep-rate")
@click.option("--epochs", type=int, required=True, help="打印 0..epochs-1")
def schedule(start_epoch, duration_epochs, target_kr, epochs):
    """打印 epoch,keep_rate 表"""
    plan = KeepRateSchedule(start_epoch, duration_epochs, target_kr)
    if epochs < 1:
        raise ConfigError([f"--epochs={epochs} 必须 >= 1"])
    frame = pd.DataFrame(
        {
            "epoch": range(epochs),
            "keep_rate": [keep_rate_at_epoch(plan, e) for e in range(epochs)],
        }
    )
    click.echo(frame.to_csv(index=False), nl=False)


@cli.command("make-toy-weights")
@click.argument("path", type=click.Path(path_type=Path))
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="读取其中的 model 段")
@click.option("--aggregation", type=click.Choice([a.value for a in Aggregation]), help="特征聚合方式")
@click.option("--seed", type=int, default=0, help="随机种子")
@click.option("--sigma", type=float, default=0.02, help="截断正态的标准差")
def make_toy_weights(path, config_path, aggregation, seed, sigma):
    """随机初始化并保存权重"""
    cfg = RunConfig.from_json(config_path).model if config_path else ModelConfig()
    if aggregation is not None:
        cfg = replace(cfg, aggregation=Aggregation(aggregation))
    problems = cfg.validate()
    if seed < 0:
        problems.append(f"seed={seed} 必须 >= 0")
    if sigma < 0:
        problems.append(f"sigma={sigma} 必须 >= 0")
    if problems:
        raise ConfigError(problems)
    weights = random_init(cfg, seed=seed, sigma=sigma)
    save_weights(weights, path)
    click.echo(f"{path}: {len(weights)} 个张量")


@cli.command()
def serve():
    """以 MCP 服务方式运行（stdio）"""
    from prune_ast.log import server_log_file
    from prune_ast.main import mcp

    setup_logging(log_file=server_log_file(), to_stderr=False)
    mcp.run()


def run(argv: Optional[Sequence[str]] = None) -> int:
    """执行 CLI 并把异常映射为退出码"""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="prune-ast", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("已中止", err=True)
        return EXIT_CONFIG
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except PruneAstError as e:
        click.echo(f"错误: {e}", err=True)
        return e.exit_code
    except OSError as e:
        click.echo(f"I/O 错误: {e}", err=True)
        return EXIT_IO
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(run())
