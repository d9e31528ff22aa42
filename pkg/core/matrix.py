"""实验矩阵：内置的 16 组插入点组合（可带调度版本）与并发执行。"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core.config_manager import ExperimentConfig, TrainConfig, thread_cap
from core.emit import SUMMARY_COLUMNS, write_csv
from core.errors import ConfigError
from core.experiment_worker import ExperimentWorker
from core.plugin_manager import PluginManager
from core.segmodel import ModelConfig
from core.trainer import ExperimentResult
from plugins.base_plugin import DEFAULT_P, RegularizerSpec

logger = logging.getLogger(__name__)

SCHEDULED_SUFFIX = '-scheduled'
COMPARISON_COLUMNS = ['experiment', 'unscheduled_mean_miou', 'scheduled_mean_miou', 'scheduled_better']

# (名字, resnet, spp, decoder)
TABLE2_ROWS = (
    ('none', 'none', 'none', 'none'),
    ('resnet-chandrop', 'channel', 'none', 'none'),
    ('spp-chandrop', 'none', 'channel', 'none'),
    ('decoder-chandrop', 'none', 'none', 'channel'),
    ('upper-chandrop', 'none', 'channel', 'channel'),
    ('all-chandrop', 'channel', 'channel', 'channel'),
    ('resnet-uout', 'uout', 'none', 'none'),
    ('spp-uout', 'none', 'uout', 'none'),
    ('decoder-uout', 'none', 'none', 'uout'),
    ('upper-uout', 'none', 'uout', 'uout'),
    ('all-uout', 'uout', 'uout', 'uout'),
    ('resnet-dropblock', 'dropblock', 'none', 'none'),
    ('spp-dropblock', 'none', 'dropblock', 'none'),
    ('decoder-dropblock', 'none', 'none', 'dropblock'),
    ('upper-dropblock', 'none', 'dropblock', 'dropblock'),
    ('all-dropblock', 'dropblock', 'dropblock', 'dropblock'),
)


def _spec(method: str, p: float, block_size: int) -> RegularizerSpec:
    if method == 'none':
        return RegularizerSpec()
    return RegularizerSpec(method=method, p=p, block_size=block_size)


def table2_matrix(train: Optional[TrainConfig] = None, model: Optional[ModelConfig] = None,
                  p: float = DEFAULT_P, block_size: int = 3, scheduled: Optional[bool] = None,
                  schedule_epochs: int = 30) -> List[ExperimentConfig]:
    """scheduled=None 时生成未调度 + 调度两套（共 32 个），True/False 只生成其中一套"""
    train = train or TrainConfig()
    model = model or ModelConfig()
    variants = (False, True) if scheduled is None else (scheduled,)
    matrix = []
    for with_schedule in variants:
        for name, resnet, spp, decoder in TABLE2_ROWS:
            matrix.append(ExperimentConfig(
                name=name + (SCHEDULED_SUFFIX if with_schedule else ''),
                resnet=_spec(resnet, p, block_size),
                spp=_spec(spp, p, block_size),
                decoder=_spec(decoder, p, block_size),
                scheduled=with_schedule,
                schedule_epochs=schedule_epochs,
                train=replace(train),
                model=replace(model),
            ))
    return matrix


def summary_row(result: ExperimentResult) -> Dict[str, object]:
    v = result.best.val
    return {'experiment': result.name, 'mean_miou': v.mean, 'std': v.std, 'worst': v.worst,
            'median': v.median, 'best': v.best, 'loss': v.loss}


def schedule_comparison(results: Sequence[ExperimentResult]) -> List[Dict[str, object]]:
    """每个有调度版本的实验：调度前后的 mean mIoU 以及调度是否更好"""
    by_name = {r.name: r for r in results}
    rows = []
    for r in results:
        scheduled = by_name.get(r.name + SCHEDULED_SUFFIX)
        if scheduled is None:
            continue
        rows.append({'experiment': r.name,
                     'unscheduled_mean_miou': r.best.val.mean,
                     'scheduled_mean_miou': scheduled.best.val.mean,
                     'scheduled_better': scheduled.best.val.mean > r.best.val.mean})
    return rows


def _run_one(exp: ExperimentConfig, out_dir: Path, plugin_mgr: PluginManager) -> ExperimentResult:
    worker = ExperimentWorker(exp, out_dir / exp.name, plugin_mgr)
    results: List[ExperimentResult] = []
    worker.finished.connect(results.append)
    worker.error.connect(lambda msg: logger.error(f"实验失败: {msg}"))
    worker.run()
    if worker.failure is not None:
        raise worker.failure
    return results[0]


def run_matrix(matrix: Sequence[ExperimentConfig], out_dir: Path, parallelism: int = 1,
               plugin_mgr: Optional[PluginManager] = None) -> List[Dict[str, object]]:
    """逐个（或并发）执行实验，写 summary.csv 与 schedule_comparison.csv，返回汇总行"""
    names = [e.name for e in matrix]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigError(f"duplicate experiment names in matrix: {duplicates}")
    out_dir = Path(out_dir)
    plugin_mgr = plugin_mgr or PluginManager()
    workers = thread_cap(parallelism)
    logger.info(f"开始执行 {len(matrix)} 个实验，并行度 {workers}")

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_one, exp, out_dir, plugin_mgr) for exp in matrix]
        # 按矩阵顺序收集，保证汇总表顺序与并行度无关
        results = [f.result() for f in futures]

    rows = [summary_row(r) for r in results]
    write_csv(out_dir / 'summary.csv', SUMMARY_COLUMNS, rows)
    comparison = schedule_comparison(results)
    if comparison:
        write_csv(out_dir / 'schedule_comparison.csv', COMPARISON_COLUMNS, comparison)
    logger.info(f"实验矩阵完成，汇总写入 {out_dir / 'summary.csv'}")
    return rows
