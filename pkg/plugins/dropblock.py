import numpy as np

from core.errors import ConfigError
from core.tensor import Tensor
from plugins.base_plugin import BaseRegularizer


def dropblock_gamma(p: float, block_size: int, height: int, width: int) -> float:
    """块中心的 Bernoulli 概率 γ = p/b² · (H·W) / ((H−b+1)(W−b+1))

    H == W == f 时就是 p/b² · f²/(f−b+1)²。
    """
    valid = (height - block_size + 1) * (width - block_size + 1)
    return p / block_size ** 2 * (height * width) / valid


class DropBlock(BaseRegularizer):
    """每个通道独立地在内部区域撒块中心，每个中心置零一个 b×b 方块。

    块中心只落在能完整容纳方块的位置，所以方块不会被边界截断。
    保留的激活乘 总数/保留数。
    """
    plugin_name = "dropblock"

    def __init__(self, config=None):
        super().__init__(config)
        self.block_size = int(self.config.get('block_size', 3))
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"dropblock: block_size must be a positive odd int, got {self.block_size}")

    def make_mask(self, shape, p, rng):
        n, c, h, w = shape
        b = self.block_size
        if b > min(h, w):
            raise ConfigError(f"dropblock: block_size {b} exceeds feature map {h}x{w}")
        gamma = dropblock_gamma(p, b, h, w)
        seeds = rng.random((n, c, h - b + 1, w - b + 1)) < gamma

        dropped = np.zeros(shape, dtype=bool)
        for di in range(b):
            for dj in range(b):
                dropped[:, :, di:di + h - b + 1, dj:dj + w - b + 1] |= seeds
        keep = ~dropped
        kept = int(keep.sum())
        scale = keep.size / kept if kept else 0.0
        return keep * scale


def dropblock(x: Tensor, p: float, block_size: int, rng: np.random.Generator, training: bool = True) -> Tensor:
    return DropBlock({'block_size': block_size}).apply(x, p, rng, training)
