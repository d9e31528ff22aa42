import numpy as np

from core.errors import ConfigError
from core.tensor import Tensor
from plugins.base_plugin import BaseRegularizer


class UOut(BaseRegularizer):
    """逐通道乘性均匀噪声 x·(1+r)，r ~ U[−β, β]；噪声零均值，不做缩放。

    β 复用 RegularizerSpec.p 字段。
    """
    plugin_name = "uout"

    def check_p(self, p):
        if p < 0:
            raise ConfigError(f"uout: beta must be non-negative, got {p}")

    def make_mask(self, shape, p, rng):
        n, c = shape[:2]
        return 1.0 + rng.uniform(-p, p, size=(n, c, 1, 1))


def uout(x: Tensor, beta: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    return UOut().apply(x, beta, rng, training)
