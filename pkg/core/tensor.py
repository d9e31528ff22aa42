"""稠密张量 + 反向模式自动微分。

计算过程记录在线程私有的 ComputationTape 上：只有在 ``with ComputationTape()``
作用域内、且输入里有 requires_grad 的张量时，运算才会被记录。
评估阶段不开 tape，自然不会产生任何记录。
"""
import logging
import os
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractViolation, ShapeError

logger = logging.getLogger(__name__)

# 调试校验模式：每个运算的输出都检查 NaN/Inf
DEBUG_VERIFY = os.environ.get('DROPREG_DEBUG', '') not in ('', '0')

_local = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """double 精度的 N 维数组，激活图约定为 (N, C, H, W)"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError('accumulate_grad', g.shape, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def verify(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation(f"non-finite values in tensor {self.name or ''} {self.shape}")

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __mul__(self, other: Union['Tensor', np.ndarray]) -> 'Tensor':
        if isinstance(other, Tensor):
            return mul(self, other)
        return mask_mul(self, np.asarray(other, dtype=np.float64))

    def sum(self) -> 'Tensor':
        return tensor_sum(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class ComputationTape:
    """按执行顺序记录的运算列表；输入总在输出之前出现"""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._outputs: Dict[int, Tensor] = {}

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.entries.append(TapeEntry(tuple(inputs), output, backward))
        self._outputs[id(output)] = output

    def produced(self, tensor: Tensor) -> bool:
        return self._outputs.get(id(tensor)) is tensor

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> 'ComputationTape':
        stack = getattr(_local, 'stack', None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False


def active_tape() -> Optional[ComputationTape]:
    stack = getattr(_local, 'stack', None)
    return stack[-1] if stack else None


def record(output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """若有活动 tape 且某个输入需要梯度，就把这次运算记下来"""
    if DEBUG_VERIFY:
        output.verify()
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(inputs, output, backward_fn)
    return output


def backward(tape: ComputationTape, root: Tensor) -> None:
    """从标量 root 反向遍历 tape，把梯度累加到每个 requires_grad 张量的 .grad 上。

    中间梯度先放在局部字典里，最后才写回 .grad，所以重复调用是严格相加的。
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    if not tape.produced(root):
        raise ContractViolation("backward root was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    seen: Dict[int, Tensor] = {id(root): root}
    for entry in reversed(tape.entries):
        g = grads.get(id(entry.output))
        if g is None:
            continue
        for tensor, g_in in zip(entry.inputs, entry.backward(g)):
            if g_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            seen[key] = tensor
            grads[key] = grads[key] + g_in if key in grads else g_in

    for key, tensor in seen.items():
        if tensor.requires_grad:
            tensor.accumulate_grad(grads[key])


# ---- 基础逐元素运算 ----

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError('add', a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError('mul', a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def mask_mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """乘以常量掩码（可按通道广播）；反向就是同一个掩码"""
    try:
        product = x.data * mask
    except ValueError:
        raise ShapeError('mask_mul', x.shape, mask.shape) from None
    if product.shape != x.shape:
        raise ShapeError('mask_mul', x.shape, mask.shape)
    out = Tensor(product)
    return record(out, (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return record(out, (x,), lambda g: (np.full(x.shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = Tensor(np.where(positive, x.data, 0.0))
    return record(out, (x,), lambda g: (g * positive,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            pieces.append(g[tuple(index)])
        return pieces

    return record(out, tuple(tensors), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,1,1)"""
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    return record(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
