import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.errors import ConfigError, DropRegIOError
from core.segmodel import HOOK_SITES, ModelConfig
from plugins.base_plugin import RegularizerSpec, Schedule

logger = logging.getLogger(__name__)

VERSION_NUMBER = "0.1.0"
THREADS_ENV = 'DROPREG_THREADS'
DATASET_SOURCES = ('synthetic', 'voc')


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    base_lr: float = 7e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    head_lr_multiplier: float = 10.0
    lr_power: float = 0.9
    seed: int = 0
    dataset: str = 'synthetic'
    dataset_root: Optional[str] = None       # VOC 根目录或 synthetic.json
    subsample_fraction: float = 0.1
    train_count: int = 400                   # 合成数据：抽样前的训练集大小
    val_count: int = 100
    synthetic: Dict[str, Any] = field(default_factory=dict)
    crop_size: int = 64
    augment: bool = True
    probe_count: int = 4
    per_epoch_probes: bool = False
    backbone_weights: Optional[str] = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.dataset not in DATASET_SOURCES:
            raise ConfigError(f"dataset must be one of {DATASET_SOURCES}, got {self.dataset!r}")
        if self.dataset == 'voc' and not self.dataset_root:
            raise ConfigError("dataset 'voc' needs dataset_root")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConfigError(f"subsample_fraction must be in (0,1], got {self.subsample_fraction}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'TrainConfig':
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"invalid train config: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ExperimentConfig:
    """一行实验矩阵：名字 + 三个插入点各自的正则化 + 训练/模型配置"""
    name: str = 'none'
    resnet: RegularizerSpec = field(default_factory=RegularizerSpec)
    spp: RegularizerSpec = field(default_factory=RegularizerSpec)
    decoder: RegularizerSpec = field(default_factory=RegularizerSpec)
    scheduled: bool = False
    schedule_epochs: int = 30
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.name:
            raise ConfigError("experiment name must not be empty")
        if self.scheduled and self.schedule_epochs < 1:
            raise ConfigError(f"schedule_epochs must be >= 1, got {self.schedule_epochs}")

    def hook_specs(self) -> Dict[str, RegularizerSpec]:
        """实际挂到模型上的正则化：种子取训练种子，开启调度时换成 linear_ramp"""
        specs = {}
        for site in HOOK_SITES:
            spec = replace(getattr(self, site), seed=self.train.seed)
            if self.scheduled:
                spec = replace(spec, schedule=Schedule.linear_ramp(self.schedule_epochs))
            specs[site] = spec
        return specs

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        return replace(self, train=replace(self.train, seed=seed))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        data = dict(data or {})
        unknown = set(data) - {'name', 'scheduled', 'schedule_epochs', 'train', 'model'} - set(HOOK_SITES)
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        hooks = {site: RegularizerSpec.from_dict(data.pop(site, None)) for site in HOOK_SITES}
        return cls(name=data.get('name', 'none'),
                   scheduled=bool(data.get('scheduled', False)),
                   schedule_epochs=int(data.get('schedule_epochs', 30)),
                   train=TrainConfig.from_dict(data.get('train')),
                   model=ModelConfig.from_dict(data.get('model')),
                   **hooks)

    def to_dict(self) -> Dict[str, Any]:
        data = {'name': self.name}
        for site in HOOK_SITES:
            data[site] = getattr(self, site).to_dict()
        data.update(scheduled=self.scheduled, schedule_epochs=self.schedule_epochs,
                    train=self.train.to_dict(), model=self.model.to_dict())
        return data


def thread_cap(requested: int) -> int:
    """并行度受环境变量 DROPREG_THREADS 限制"""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return max(1, requested)
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(requested, cap))


class ConfigManager:
    """读写实验配置文件。

    文件可以是单个 ExperimentConfig 对象，也可以是
    {"version", "settings", "experiments": [...]}；settings 里的
    键作为每个实验 train 配置的默认值。
    """

    def __init__(self, config_path: Optional[Path] = None):
        self.config_path = Path(config_path) if config_path else None
        self.experiments: List[ExperimentConfig] = []
        self.settings: Dict[str, Any] = {}
        if self.config_path is not None:
            self.load()

    def load(self):
        """从文件加载配置"""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except OSError as e:
            raise DropRegIOError(f"cannot read config {self.config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {self.config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_path}: top level must be an object")

        if 'experiments' in data:
            self.settings = data.get('settings', {})
            items = data['experiments']
        else:
            self.settings = {}
            items = [data]
        self.experiments = []
        for item in items:
            item = dict(item)
            item['train'] = {**self.settings, **(item.get('train') or {})}
            self.experiments.append(ExperimentConfig.from_dict(item))
        names = [e.name for e in self.experiments]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate experiment names in {self.config_path}")
        logger.info(f"已加载 {len(self.experiments)} 个实验配置: {self.config_path}")

    def save(self, path: Optional[Path] = None):
        """保存配置到文件"""
        path = Path(path) if path else self.config_path
        data = {'version': VERSION_NUMBER,
                'settings': self.settings,
                'experiments': [e.to_dict() for e in self.experiments]}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, ensure_ascii=False)
        except OSError as e:
            raise DropRegIOError(f"cannot write config {path}: {e}") from e

    def get(self, key, default=None):
        return self.settings.get(key, default)

    def set(self, key, value):
        self.settings[key] = value

    def add_experiment(self, experiment: ExperimentConfig):
        if any(e.name == experiment.name for e in self.experiments):
            raise ConfigError(f"experiment {experiment.name!r} already exists")
        self.experiments.append(experiment)
