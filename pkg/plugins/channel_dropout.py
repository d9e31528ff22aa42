import numpy as np

from core.tensor import Tensor
from plugins.base_plugin import BaseRegularizer


class ChannelDropout(BaseRegularizer):
    """SpatialDropout：每个 (batch, channel) 一次 Bernoulli 决策，整张 H×W 平面一起置零"""
    plugin_name = "channel"

    def make_mask(self, shape, p, rng):
        n, c = shape[:2]
        keep = rng.random((n, c, 1, 1)) >= p
        return keep / (1.0 - p)


def channel_dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    return ChannelDropout().apply(x, p, rng, training)
