import numpy as np

from core.tensor import Tensor
from plugins.base_plugin import BaseRegularizer


class VanillaDropout(BaseRegularizer):
    """逐标量独立置零，保留的元素乘 1/(1−p)（训练期反向缩放）"""
    plugin_name = "vanilla"

    def make_mask(self, shape, p, rng):
        keep = rng.random(shape) >= p
        return keep / (1.0 - p)


def vanilla_dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    return VanillaDropout().apply(x, p, rng, training)
