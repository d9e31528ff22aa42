"""按 key 派生的随机数生成器。

同一个 key 永远得到同一条随机流，与调用顺序、线程数无关。
SeedSequence 会把短 key 末尾补 0，所以每类随机流的 key 都以各自的
流编号开头、长度固定，互相不会撞上。
"""
import numpy as np

STREAM_MASK = 1
STREAM_ORDER = 2
STREAM_AUGMENT = 3
STREAM_SYNTHETIC = 4
STREAM_SUBSAMPLE = 5


def keyed_rng(*key: int) -> np.random.Generator:
    """由若干非负整数构成的 key 生成独立的 Generator"""
    words = [int(k) for k in key]
    if any(k < 0 for k in words):
        raise ValueError(f"rng key must be non-negative: {words}")
    return np.random.default_rng(np.random.SeedSequence(words))


def mask_rng(seed: int, epoch: int, layer_id: int, batch_index: int) -> np.random.Generator:
    # 掩码的 key：(seed, epoch, 层号, batch 序号)
    return keyed_rng(STREAM_MASK, seed, epoch, layer_id, batch_index)


def order_rng(seed: int, epoch: int) -> np.random.Generator:
    return keyed_rng(STREAM_ORDER, seed, epoch)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return keyed_rng(STREAM_AUGMENT, seed, epoch, index)


def synthetic_rng(seed: int, index: int) -> np.random.Generator:
    return keyed_rng(STREAM_SYNTHETIC, seed, index)


def subsample_rng(seed: int) -> np.random.Generator:
    return keyed_rng(STREAM_SUBSAMPLE, seed)
