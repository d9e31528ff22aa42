"""SGD（动量 + 权重衰减）与 poly 学习率。"""
import logging
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from core.errors import OptimizerError, ScheduleError
from core.segmodel import ParameterGroup
from core.tensor import Tensor

logger = logging.getLogger(__name__)


def poly_lr(base_lr: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    """base_lr · (1 − iteration/max_iterations)^power；iteration 为全局迭代数"""
    if max_iterations < 1:
        raise ScheduleError(f"max_iterations must be >= 1, got {max_iterations}")
    if not 0 <= iteration <= max_iterations:
        raise ScheduleError(f"iteration {iteration} outside [0, {max_iterations}]")
    return base_lr * (1.0 - iteration / max_iterations) ** power


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
             velocity: Dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """原地更新一组参数：v ← m·v + g + wd·p；p ← p − lr·v"""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise OptimizerError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        v = momentum * v + g + weight_decay * p
        velocity[name] = v
        p -= lr * v


class SGD:
    """按参数组施加学习率倍率；冻结的组不更新。速度状态随检查点保存。"""

    def __init__(self, named_params: Mapping[str, Tensor], groups: Sequence[ParameterGroup],
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        if not 0.0 <= momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0,1), got {momentum}")
        if weight_decay < 0:
            raise OptimizerError(f"weight_decay must be non-negative, got {weight_decay}")
        self.params = dict(named_params)
        self.groups = list(groups)
        unknown = [n for g in self.groups for n in g.names if n not in self.params]
        if unknown:
            raise OptimizerError(f"parameter groups name unknown parameters: {unknown[:3]}")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}
        self.last_lrs: Dict[str, float] = {}

    def step(self, base_lr: float) -> None:
        self.last_lrs = {}
        for group in self.groups:
            if group.frozen:
                continue
            lr = base_lr * group.lr_multiplier
            self.last_lrs[group.group_id] = lr
            tensors = {n: self.params[n] for n in group.names}
            sgd_step({n: t.data for n, t in tensors.items()}, {n: t.grad for n, t in tensors.items()},
                     self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{name}": v for name, v in self.velocity.items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.velocity = {}
        for key, value in tensors.items():
            if not key.startswith('velocity.'):
                continue
            name = key[len('velocity.'):]
            if name not in self.params:
                raise OptimizerError(f"velocity for unknown parameter {name}")
            if value.shape != self.params[name].shape:
                raise OptimizerError(f"velocity for {name} has shape {value.shape}")
            self.velocity[name] = np.array(value, dtype=np.float64)
        logger.debug(f"已恢复 {len(self.velocity)} 个速度张量")
