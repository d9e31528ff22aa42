"""把训练指标写成 CSV / JSON，并画出训练曲线。

浮点数一律 17 位有效数字，同一次运行重跑得到逐字节相同的文件。
"""
import csv
import json
import logging
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from core.errors import DropRegIOError, EvaluationError

matplotlib.use('Agg')
logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'mean_miou', 'std', 'worst', 'median', 'best',
                 'train_miou', 'effective_p', 'best_image', 'worst_image']
SUMMARY_COLUMNS = ['experiment', 'mean_miou', 'std', 'worst', 'median', 'best', 'loss']
# 文件名 -> (纵轴标题, 取值)
CURVES = {
    'train_loss.png': ('train loss', lambda m: m.train_loss),
    'val_loss.png': ('val loss', lambda m: m.val.loss),
    'train_mious.png': ('train mIoU', lambda m: m.train_miou),
    'val_mious.png': ('val mIoU', lambda m: m.val.mean),
}


def format_value(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_value(row[c]) for c in columns])
    except OSError as e:
        raise DropRegIOError(f"cannot write {path}: {e}") from e
    return path


def _plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value) if f.compare}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path: Path, payload: Any) -> Path:
    """float 的 repr 是最短的可逆十进制表示，json 解析后逐位还原"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(_plain(payload), f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write('\n')
    except OSError as e:
        raise DropRegIOError(f"cannot write {path}: {e}") from e
    return path


def epoch_row(m) -> Dict[str, Any]:
    row = {'epoch': m.epoch, 'train_loss': m.train_loss, 'val_loss': m.val.loss,
           'train_miou': m.train_miou, 'effective_p': m.effective_p,
           'best_image': m.best_image, 'worst_image': m.worst_image}
    row.update({k: getattr(m.val, k) for k in ('mean', 'std', 'worst', 'median', 'best')})
    row['mean_miou'] = row.pop('mean')
    return row


def plot_curves(metrics: Sequence, directory: Path) -> List[Path]:
    """每个 epoch 一个点：训练/验证 loss 与 mIoU 各一张图"""
    directory = Path(directory)
    epochs = [m.epoch for m in metrics]
    paths = []
    for filename, (title, value) in CURVES.items():
        # 只用 Figure 对象，不碰 pyplot 的全局状态
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        ax.plot(epochs, [value(m) for m in metrics], marker='o')
        ax.set_xlabel('epoch')
        ax.set_ylabel(title)
        ax.grid(True, alpha=0.3)
        path = directory / filename
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, dpi=100, bbox_inches='tight')
        except OSError as e:
            raise DropRegIOError(f"cannot write {path}: {e}") from e
        paths.append(path)
    return paths


def emit_metrics(metrics: Sequence, directory: Path, best=None, extra: Mapping[str, Any] = None) -> List[Path]:
    """metrics.csv（每个 epoch 一行）+ summary.json（全部 epoch 与最佳 epoch）+ 四张曲线图"""
    if not metrics:
        raise EvaluationError("no epoch metrics to emit")
    directory = Path(directory)
    csv_path = write_csv(directory / 'metrics.csv', EPOCH_COLUMNS, [epoch_row(m) for m in metrics])
    payload = {'epochs': list(metrics)}
    if best is not None:
        payload['best_epoch'] = best
    if extra:
        payload.update(extra)
    json_path = write_json(directory / 'summary.json', payload)
    curve_paths = plot_curves(metrics, directory)
    logger.debug(f"指标已写入 {directory}")
    return [csv_path, json_path] + curve_paths
