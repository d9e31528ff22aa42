"""正则化插件的公共部分：RegularizerSpec、调度、掩码以及插件基类。

所有插件都是训练期的乘性掩码变换，前向乘掩码、反向乘同一个掩码；
推理模式下原样返回输入。
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.errors import ConfigError, ScheduleError
from core.tensor import Tensor, mask_mul

METHODS = ('none', 'vanilla', 'channel', 'dropblock', 'uout')
SCHEDULES = ('constant', 'linear_ramp')
# 配置里只写方法名、不写 p 时使用的概率
DEFAULT_P = 0.2


@dataclass(frozen=True)
class Schedule:
    kind: str = 'constant'
    n_epochs: int = 30

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.kind!r}, expected one of {SCHEDULES}")
        if self.kind == 'linear_ramp' and self.n_epochs < 1:
            raise ConfigError(f"linear_ramp needs n_epochs >= 1, got {self.n_epochs}")

    @classmethod
    def linear_ramp(cls, n_epochs: int = 30) -> 'Schedule':
        return cls('linear_ramp', n_epochs)


@dataclass(frozen=True)
class RegularizerSpec:
    """哪种方法、多大概率（UOut 时复用为 β）、块大小、调度方式与种子"""
    method: str = 'none'
    p: float = 0.0
    block_size: int = 3
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown regularizer {self.method!r}, expected one of {METHODS}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"regularizer p must be in [0,1), got {self.p}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"block_size must be a positive odd int, got {self.block_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def active(self) -> bool:
        return self.method != 'none'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'RegularizerSpec':
        if data is None:
            return cls()
        if isinstance(data, str):
            data = {'method': data}
        data = dict(data)
        if data.get('method', 'none') != 'none':
            data.setdefault('p', DEFAULT_P)
        schedule = data.pop('schedule', None)
        if isinstance(schedule, dict):
            data['schedule'] = Schedule(**schedule)
        elif isinstance(schedule, str):
            data['schedule'] = Schedule(schedule)
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid regularizer spec {data}: {e}") from e


def scheduled_p(spec: RegularizerSpec, epoch: int) -> float:
    """ScheduledDropPath：linear_ramp(n) 下为 p·min(epoch/n, 1)，在每个 epoch 开始时取值"""
    if epoch < 0:
        raise ScheduleError(f"epoch must be non-negative, got {epoch}")
    if spec.schedule.kind == 'constant':
        return spec.p
    return spec.p * min(epoch / spec.schedule.n_epochs, 1.0)


@dataclass
class DropMask:
    values: np.ndarray
    method: str
    p: float
    epoch: int = 0

    @property
    def dropped_fraction(self) -> float:
        full = np.broadcast_to(self.values, self.values.shape)
        return float(np.mean(full == 0))


class BaseRegularizer:
    """所有正则化插件必须继承此类，并实现 make_mask"""
    plugin_name: Optional[str] = None

    def __init__(self, config: Optional[dict] = None):
        """
        :param config: 插件配置字典（例如 DropBlock 的 block_size）
        """
        self.config = config or {}
        self.mask_draws = 0

    def check_p(self, p: float) -> None:
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"{self.plugin_name}: drop probability must be in [0,1), got {p}")

    def make_mask(self, shape: Tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
        """返回可与 shape 广播相乘的掩码"""
        raise NotImplementedError

    def draw_mask(self, shape: Tuple[int, ...], p: float, rng: np.random.Generator, epoch: int = 0) -> DropMask:
        self.check_p(p)
        self.mask_draws += 1
        return DropMask(self.make_mask(tuple(shape), p, rng), self.plugin_name, p, epoch)

    def apply(self, x: Tensor, p: float, rng: np.random.Generator,
              training: bool = True, epoch: int = 0) -> Tensor:
        if not training:
            return x
        if x.ndim != 4:
            raise ConfigError(f"{self.plugin_name}: expected rank-4 input, got shape {x.shape}")
        mask = self.draw_mask(x.shape, p, rng, epoch)
        return mask_mul(x, mask.values)
