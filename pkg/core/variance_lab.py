"""Dropout / UOut 在训练与测试之间造成的方差偏移：闭式解与蒙特卡洛估计。

比值 = 测试期方差 / 训练期方差。只实现相关项已经消去之后的单单元形式。
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from core.errors import ConfigError, DropRegIOError, UndefinedRatioError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10_000
SWEEP_HEADER = ['method', 'mu', 'v', 'p_or_beta', 'closed_form', 'monte_carlo', 'stderr']


@dataclass(frozen=True)
class ShiftScenario:
    mu: float = 0.0
    v: float = 1.0
    keep_p: float = 0.9
    beta: float = 0.1
    n_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.v <= 0:
            raise ConfigError(f"variance v must be positive, got {self.v}")
        if not 0.0 <= self.keep_p <= 1.0:
            raise ConfigError(f"keep_p must be in (0,1], got {self.keep_p}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.n_samples < MIN_SAMPLES:
            raise ConfigError(f"n_samples must be >= {MIN_SAMPLES}, got {self.n_samples}")


@dataclass(frozen=True)
class ShiftReport:
    closed_form_ratio: float
    monte_carlo_ratio: float
    standard_error: float

    @property
    def agrees(self) -> bool:
        return abs(self.closed_form_ratio - self.monte_carlo_ratio) <= 4 * self.standard_error


def dropout_shift_closed_form(s: ShiftScenario) -> float:
    """v / ((1/p)(μ² + v) − μ²)，p 为保留概率"""
    if s.keep_p <= 0:
        raise UndefinedRatioError("dropout shift is undefined for keep_p = 0")
    mu2 = s.mu * s.mu
    return s.v / ((mu2 + s.v) / s.keep_p - mu2)


def uout_shift_closed_form(s: ShiftScenario) -> float:
    """v / E((x + x·r)²) 展开后为 v / ((μ² + v)(1 + β²/3) − μ²)"""
    mu2 = s.mu * s.mu
    return s.v / ((mu2 + s.v) * (1.0 + s.beta * s.beta / 3.0) - mu2)


def _jackknife_variance_ratio(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    """Var(x)/Var(y) 及其 delete-one jackknife 标准误（用和式 O(n) 计算）"""
    n = x.size
    sx, sxx = x.sum(), np.dot(x, x)
    sy, syy = y.sum(), np.dot(y, y)

    def _var(s, ss, m):
        mean = s / m
        return ss / m - mean * mean

    ratio = _var(sx, sxx, n) / _var(sy, syy, n)
    loo = _var(sx - x, sxx - x * x, n - 1) / _var(sy - y, syy - y * y, n - 1)
    spread = loo - loo.mean()
    stderr = float(np.sqrt((n - 1) / n * np.dot(spread, spread)))
    return float(ratio), stderr


def monte_carlo_shift(s: ShiftScenario, method: str) -> ShiftReport:
    """对 x ~ N(μ, v) 施加训练期变换，估计测试/训练方差比"""
    rng = np.random.default_rng(s.seed)
    x = rng.normal(s.mu, np.sqrt(s.v), size=s.n_samples)
    if method == 'dropout':
        closed = dropout_shift_closed_form(s)
        keep = rng.random(s.n_samples) < s.keep_p
        y = np.where(keep, x / s.keep_p, 0.0)
    elif method == 'uout':
        closed = uout_shift_closed_form(s)
        y = x * (1.0 + rng.uniform(-s.beta, s.beta, size=s.n_samples))
    else:
        raise ConfigError(f"unknown shift method {method!r}, expected 'dropout' or 'uout'")
    ratio, stderr = _jackknife_variance_ratio(x, y)
    return ShiftReport(closed, ratio, stderr)


def default_sweep(n_samples: int = 200_000, seed: int = 0) -> List[Tuple[str, ShiftScenario]]:
    """不给 sweep 文件时的默认扫描：两个典型设置 + 一组 p / β 网格"""
    runs = [('dropout', ShiftScenario(keep_p=0.9, n_samples=n_samples, seed=seed)),
            ('uout', ShiftScenario(beta=0.1, n_samples=n_samples, seed=seed))]
    for mu in (0.0, 1.0):
        for keep_p in (0.5, 0.7, 0.8):
            runs.append(('dropout', ShiftScenario(mu=mu, keep_p=keep_p, n_samples=n_samples, seed=seed)))
        for beta in (0.2, 0.5, 1.0):
            runs.append(('uout', ShiftScenario(mu=mu, beta=beta, n_samples=n_samples, seed=seed)))
    return runs


def load_sweep(path: Path) -> List[Tuple[str, ShiftScenario]]:
    """sweep 文件：JSON 列表，每项 {"method": ..., 其余为 ShiftScenario 字段}"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            items = json.load(f)
    except OSError as e:
        raise DropRegIOError(f"cannot read sweep file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid sweep file {path}: {e}") from e
    runs = []
    for item in items:
        item = dict(item)
        method = item.pop('method', None)
        if method not in ('dropout', 'uout'):
            raise ConfigError(f"sweep entry needs method 'dropout' or 'uout', got {method!r}")
        try:
            runs.append((method, ShiftScenario(**item)))
        except TypeError as e:
            raise ConfigError(f"invalid sweep entry {item}: {e}") from e
    return runs


def run_sweep(runs: Iterable[Tuple[str, ShiftScenario]], path: Path) -> List[dict]:
    rows = []
    for method, s in runs:
        report = monte_carlo_shift(s, method)
        rows.append({
            'method': method, 'mu': s.mu, 'v': s.v,
            'p_or_beta': s.keep_p if method == 'dropout' else s.beta,
            'closed_form': report.closed_form_ratio,
            'monte_carlo': report.monte_carlo_ratio,
            'stderr': report.standard_error,
        })
        if not report.agrees:
            logger.warning(f"方差偏移估计与闭式解偏差较大: {method} {asdict(s)} -> {report}")
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_HEADER)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (format(v, '.17g') if isinstance(v, float) else v) for k, v in row.items()})
    except OSError as e:
        raise DropRegIOError(f"cannot write sweep csv {path}: {e}") from e
    logger.info(f"方差偏移扫描完成: {len(rows)} 行 -> {path}")
    return rows
