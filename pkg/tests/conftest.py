import numpy as np
import pytest

from core.config_manager import ExperimentConfig, TrainConfig
from core.segmodel import ModelConfig
from core.tensor import ComputationTape, Tensor, backward


TINY_MODEL = dict(in_channels=3, num_classes=3, stage_widths=(4, 8, 8), blocks_per_stage=1,
                  pyramid_rates=(1, 2), decoder_width=8, skip_width=4, output_stride=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_synthetic():
    return {'canvas': 16, 'classes': ['disk', 'rectangle'], 'shapes_per_scene': [1, 2], 'noise': 0.05}


@pytest.fixture
def tiny_experiment(tiny_synthetic):
    """几秒内跑完的小实验：16×16 合成数据、每类 4 张训练图"""
    train = TrainConfig(epochs=2, batch_size=2, train_count=8, val_count=4, subsample_fraction=1.0,
                        synthetic=tiny_synthetic, crop_size=16, probe_count=2)
    return ExperimentConfig(name='tiny', train=train, model=ModelConfig(**TINY_MODEL))


def gradient(loss_fn, tensor: Tensor) -> np.ndarray:
    """在新 tape 上求 loss_fn() 对 tensor 的解析梯度"""
    tensor.zero_grad()
    tensor.requires_grad = True
    with ComputationTape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return tensor.grad.copy()


def numeric_gradient(loss_fn, tensor: Tensor, eps: float = 1e-6, indices=None) -> np.ndarray:
    """中心差分；indices 给定时只算这些扁平下标"""
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(tensor.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
