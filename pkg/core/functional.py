"""玩具分割网络用到的可微运算：卷积、BatchNorm、双线性上采样、逐像素交叉熵。

所有运算都是 double 精度、直接窗口展开（im2col）实现，优先保证梯度正确。
"""
import logging
from typing import Optional, Union

import numpy as np

from core.errors import (ConfigError, DegenerateBatchError, EmptyTargetError,
                         InvalidLabelError, ShapeError, UnsupportedOperationError)
from core.tensor import Tensor, record

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw)"""
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            patch = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Union[Tensor, np.ndarray]] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """二维卷积，支持 stride / 零填充 / 空洞率。

    输出尺寸 = floor((H + 2·padding − dilation·(kH−1) − 1) / stride) + 1
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d', x.shape, weight.shape)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} padding={padding} dilation={dilation}")
    if bias is not None and not isinstance(bias, Tensor):
        bias = Tensor(bias)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeError('conv2d bias', bias.shape, (o,))

    hp, wp = h + 2 * padding, w + 2 * padding
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if hp < eh or wp < ew:
        raise ShapeError('conv2d window', (hp, wp), (eh, ew))
    ho, wo = (hp - eh) // stride + 1, (wp - ew) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(out_data))

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        d_weight = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_x = dxp[:, :, padding:padding + h, padding:padding + w]
        grads = [d_x, d_weight]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, _backward)


class BatchNormState:
    """逐通道的 γ、b（可学习）与 running 统计量"""

    def __init__(self, num_channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = ''):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in (0,1), got {momentum}")
        if eps <= 0:
            raise ConfigError(f"batchnorm epsilon must be positive, got {eps}")
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Tensor(np.ones(num_channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(num_channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self.training = True

    def train(self, mode: bool = True) -> None:
        self.training = mode


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.num_channels:
        raise ShapeError('batchnorm2d', x.shape, (None, state.num_channels, None, None))
    n, c, h, w = x.shape
    gamma, beta = state.gamma, state.beta
    g4 = gamma.data[None, :, None, None]

    if not state.training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = Tensor(g4 * xhat + beta.data[None, :, None, None])

        def _backward_eval(g):
            return (g * g4 * inv_std[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

        return record(out, (x, gamma, beta), _backward_eval)

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batchnorm2d {state.name}: training mode needs N*H*W >= 2, got {m}")
    axes = (0, 2, 3)
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(g4 * xhat + beta.data[None, :, None, None])

    mom = state.momentum
    state.running_mean = (1.0 - mom) * state.running_mean + mom * mean
    state.running_var = (1.0 - mom) * state.running_var + mom * var * (m / (m - 1))

    def _backward_train(g):
        dxhat = g * g4
        d_x = (inv_std[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return d_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, gamma, beta), _backward_train)


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """align_corners=False 的一维线性插值矩阵，形状 (out_size, in_size)"""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    rows = np.arange(out_size)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError('bilinear_upsample', x.shape, ('N', 'C', 'H', 'W'))
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise UnsupportedOperationError(f"bilinear_upsample cannot downsample {(h, w)} -> {(out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return x
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    out = Tensor(ah @ x.data @ aw.T)
    return record(out, (x,), lambda g: (ah.T @ g @ aw,))


def softmax_cross_entropy_map(logits: Tensor, target: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """逐像素 softmax 交叉熵，对未忽略像素取平均，返回标量张量"""
    if logits.ndim != 4:
        raise ShapeError('softmax_cross_entropy_map', logits.shape, ('N', 'K', 'H', 'W'))
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError('softmax_cross_entropy_map target', target.shape, (n, h, w))

    valid = target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyTargetError("softmax_cross_entropy_map: every pixel is ignored")
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidLabelError(f"label {int(target[where])} at {where} outside [0, {k})")

    labels = np.where(valid, target, 0).astype(np.int64)[:, None]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = np.take_along_axis(z, labels, axis=1) - lse
    weights = valid[:, None].astype(np.float64)
    out = Tensor(-(log_p * weights).sum() / count)

    def _backward(g):
        probs = np.exp(z - lse)
        np.put_along_axis(probs, labels, np.take_along_axis(probs, labels, axis=1) - 1.0, axis=1)
        return (probs * (weights * (float(g) / count)),)

    return record(out, (logits,), _backward)
