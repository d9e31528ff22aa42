"""缩小版 DeepLabV3+：残差骨干 + 多空洞率金字塔池化 + 带低层跳连的解码器。

三个 dropout 插入点：
  resnet   每个残差块相加、ReLU 之后
  spp      金字塔分支拼接并经 1×1 融合之后
  decoder  解码器最后一层特征之后、K 路 1×1 分类器之前
"""
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import checkpoint
from core.errors import ConfigError, InputError
from core.functional import BatchNormState, batchnorm2d, bilinear_upsample, conv2d
from core.plugin_manager import PluginManager
from core.tensor import Tensor, add, concat, global_avg_pool, relu
from plugins.base_plugin import RegularizerSpec, scheduled_p
from utils.rng import mask_rng

logger = logging.getLogger(__name__)

HOOK_SITES = ('resnet', 'spp', 'decoder')
_SITE_INDEX = {site: i for i, site in enumerate(HOOK_SITES)}


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 21
    stage_widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    pyramid_rates: Tuple[int, ...] = (1, 2, 4)
    decoder_width: int = 32
    skip_width: int = 8
    output_stride: int = 8

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.pyramid_rates = tuple(int(r) for r in self.pyramid_rates)
        widths = (self.in_channels, self.num_classes, self.decoder_width, self.skip_width) + self.stage_widths
        if not self.stage_widths or any(w <= 0 for w in widths):
            raise ConfigError(f"all widths must be positive: {asdict(self)}")
        if self.blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if not self.pyramid_rates or any(r < 1 for r in self.pyramid_rates) \
                or len(set(self.pyramid_rates)) != len(self.pyramid_rates):
            raise ConfigError(f"pyramid rates must be distinct and >= 1, got {self.pyramid_rates}")
        os_ = self.output_stride
        if os_ < 4 or os_ & (os_ - 1):
            raise ConfigError(f"output_stride must be a power of two >= 4, got {os_}")
        if 2 * 2 ** len(self.stage_widths) < os_:
            raise ConfigError(f"{len(self.stage_widths)} stages cannot reach output stride {os_}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data['stage_widths'] = list(self.stage_widths)
        data['pyramid_rates'] = list(self.pyramid_rates)
        return data

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> 'ModelConfig':
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"invalid model config {data}: {e}") from e


@dataclass
class ParameterGroup:
    group_id: str
    names: List[str]
    lr_multiplier: float
    frozen: bool = False


class HookPoint:
    """插入点上挂的正则化（至多一个）"""

    def __init__(self, site: str, spec: Optional[RegularizerSpec] = None,
                 plugin_mgr: Optional[PluginManager] = None):
        if site not in HOOK_SITES:
            raise ConfigError(f"unknown hook point {site!r}, expected one of {HOOK_SITES}")
        self.site = site
        self.spec = spec or RegularizerSpec()
        plugin_mgr = plugin_mgr or PluginManager()
        self.regularizer = plugin_mgr.get_plugin(self.spec.method, {'block_size': self.spec.block_size})
        self.invocations = 0
        self.last_p = 0.0

    def layer_id(self, slot: int) -> int:
        return _SITE_INDEX[self.site] * 1000 + slot

    def __call__(self, x: Tensor, epoch: int, training: bool, batch_index: int, slot: int = 0) -> Tensor:
        if not training or self.regularizer is None:
            return x
        p = scheduled_p(self.spec, epoch)
        self.invocations += 1
        self.last_p = p
        rng = mask_rng(self.spec.seed, epoch, self.layer_id(slot), batch_index)
        return self.regularizer.apply(x, p, rng, training=True, epoch=epoch)


# ---- 层 ----

class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, bias: bool = False):
        fan_in = in_ch * kernel * kernel
        # He 初始化
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias") if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvBNReLU:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, activate: bool = True):
        self.conv = Conv2d(f"{name}.conv", in_ch, out_ch, kernel, rng, stride, dilation)
        self.bn = BatchNormState(out_ch, name=f"{name}.bn")
        self.activate = activate

    def parameters(self) -> List[Tensor]:
        return self.conv.parameters() + [self.bn.gamma, self.bn.beta]

    def batchnorms(self) -> List[BatchNormState]:
        return [self.bn]

    def __call__(self, x: Tensor) -> Tensor:
        y = batchnorm2d(self.conv(x), self.bn)
        return relu(y) if self.activate else y


class ResidualBlock:
    """conv-BN-ReLU, conv-BN, 加上恒等或投影跳连，再 ReLU"""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1):
        self.body1 = ConvBNReLU(f"{name}.conv1", in_ch, out_ch, 3, rng, stride, dilation)
        self.body2 = ConvBNReLU(f"{name}.conv2", out_ch, out_ch, 3, rng, 1, dilation, activate=False)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = ConvBNReLU(f"{name}.proj", in_ch, out_ch, 1, rng, stride, activate=False)

    def _layers(self) -> list:
        return [self.body1, self.body2] + ([self.proj] if self.proj else [])

    def parameters(self) -> List[Tensor]:
        return [p for layer in self._layers() for p in layer.parameters()]

    def batchnorms(self) -> List[BatchNormState]:
        return [bn for layer in self._layers() for bn in layer.batchnorms()]

    def __call__(self, x: Tensor) -> Tensor:
        skip = self.proj(x) if self.proj else x
        return relu(add(self.body2(self.body1(x)), skip))


class Backbone:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = cfg.stage_widths
        self.stem = ConvBNReLU('backbone.stem', cfg.in_channels, widths[0], 3, rng, stride=2)
        self.stages: List[List[ResidualBlock]] = []
        current, dilation, in_ch = 2, 1, widths[0]
        for s, width in enumerate(widths):
            if current < cfg.output_stride:
                stride = 2
                current *= 2
            else:
                stride = 1
                dilation *= 2
            blocks = []
            for b in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(f"backbone.stage{s + 1}.block{b}", in_ch, width, rng,
                                            stride if b == 0 else 1, dilation))
                in_ch = width
            self.stages.append(blocks)
        self.low_level_channels = widths[0]
        self.out_channels = widths[-1]

    def blocks(self) -> List[ResidualBlock]:
        return [block for stage in self.stages for block in stage]

    def parameters(self) -> List[Tensor]:
        return self.stem.parameters() + [p for block in self.blocks() for p in block.parameters()]

    def batchnorms(self) -> List[BatchNormState]:
        return self.stem.batchnorms() + [bn for block in self.blocks() for bn in block.batchnorms()]

    def __call__(self, x: Tensor, hook: Callable[[Tensor, int], Tensor]) -> Tuple[Tensor, Tensor]:
        """返回 (低层特征, 最深层特征)；每个残差块输出后调用 hook(x, slot)"""
        y = self.stem(x)
        low_level = None
        slot = 0
        for stage in self.stages:
            for block in stage:
                y = hook(block(y), slot)
                slot += 1
            if low_level is None:
                low_level = y
        return low_level, y


class Pyramid:
    """并行空洞 3×3 分支 + 全局平均池化分支，拼接后 1×1 融合"""

    def __init__(self, cfg: ModelConfig, in_ch: int, rng: np.random.Generator):
        width = cfg.decoder_width
        self.branches = [ConvBNReLU(f"head.pyramid.branch{i}", in_ch, width, 3, rng, dilation=r)
                         for i, r in enumerate(cfg.pyramid_rates)]
        # 全局分支只有 1×1 空间，不接 BatchNorm
        self.pool_conv = Conv2d('head.pyramid.pool', in_ch, width, 1, rng, bias=True)
        self.fuse = ConvBNReLU('head.pyramid.fuse', width * (len(self.branches) + 1), width, 1, rng)

    def parameters(self) -> List[Tensor]:
        params = [p for branch in self.branches for p in branch.parameters()]
        return params + self.pool_conv.parameters() + self.fuse.parameters()

    def batchnorms(self) -> List[BatchNormState]:
        return [bn for branch in self.branches for bn in branch.batchnorms()] + self.fuse.batchnorms()

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        outs = [branch(x) for branch in self.branches]
        pooled = relu(self.pool_conv(global_avg_pool(x)))
        outs.append(bilinear_upsample(pooled, h, w))
        return self.fuse(concat(outs, axis=1))


class Decoder:
    def __init__(self, cfg: ModelConfig, low_level_ch: int, rng: np.random.Generator):
        width = cfg.decoder_width
        self.reduce = ConvBNReLU('head.decoder.reduce', low_level_ch, cfg.skip_width, 1, rng)
        self.conv1 = ConvBNReLU('head.decoder.conv1', width + cfg.skip_width, width, 3, rng)
        self.conv2 = ConvBNReLU('head.decoder.conv2', width, width, 3, rng)
        self.classifier = Conv2d('head.decoder.classifier', width, cfg.num_classes, 1, rng, bias=True)

    def parameters(self) -> List[Tensor]:
        return (self.reduce.parameters() + self.conv1.parameters() + self.conv2.parameters()
                + self.classifier.parameters())

    def batchnorms(self) -> List[BatchNormState]:
        return self.reduce.batchnorms() + self.conv1.batchnorms() + self.conv2.batchnorms()

    def features(self, fused: Tensor, low_level: Tensor) -> Tensor:
        h, w = low_level.shape[2:]
        up = bilinear_upsample(fused, h, w)
        return self.conv2(self.conv1(concat([up, self.reduce(low_level)], axis=1)))


class SegModel:
    def __init__(self, cfg: ModelConfig, hooks: Dict[str, HookPoint], seed: int):
        self.config = cfg
        self.seed = seed
        self.hooks = {site: hooks.get(site) or HookPoint(site) for site in HOOK_SITES}
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg, rng)
        self.pyramid = Pyramid(cfg, self.backbone.out_channels, rng)
        self.decoder = Decoder(cfg, self.backbone.low_level_channels, rng)
        self.training = True

    # ---- 参数与状态 ----

    def named_parameters(self) -> Dict[str, Tensor]:
        params = self.backbone.parameters() + self.pyramid.parameters() + self.decoder.parameters()
        return {p.name: p for p in params}

    def batchnorms(self) -> List[BatchNormState]:
        return self.backbone.batchnorms() + self.pyramid.batchnorms() + self.decoder.batchnorms()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters().items()}
        for bn in self.batchnorms():
            state[f"{bn.name}.running_mean"] = bn.running_mean
            state[f"{bn.name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, tensors: Dict[str, np.ndarray], prefix: str = '', strict: bool = True) -> int:
        """按名字载入参数与 BN 统计量，返回载入的张量数"""
        params = self.named_parameters()
        buffers = {f"{bn.name}.{kind}": (bn, kind) for bn in self.batchnorms()
                   for kind in ('running_mean', 'running_var')}
        loaded = 0
        for name in list(params) + list(buffers):
            if not name.startswith(prefix):
                continue
            if name not in tensors:
                if strict:
                    raise ConfigError(f"checkpoint is missing tensor {name}")
                continue
            values = np.asarray(tensors[name], dtype=np.float64)
            target = params[name].data if name in params else getattr(*buffers[name])
            if values.shape != target.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {values.shape}, model expects {target.shape}")
            if name in params:
                params[name].data = values.copy()
            else:
                bn, kind = buffers[name]
                setattr(bn, kind, values.copy())
            loaded += 1
        return loaded

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def train(self, mode: bool = True) -> 'SegModel':
        self.training = mode
        for bn in self.batchnorms():
            bn.train(mode)
        return self

    def eval(self) -> 'SegModel':
        return self.train(False)

    @property
    def mask_invocations(self) -> int:
        return sum(hook.invocations for hook in self.hooks.values())

    # ---- 前向 ----

    def forward(self, x: Tensor, epoch: int = 0, batch_index: int = 0) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise InputError(f"expected input (N, {self.config.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        stride = self.config.output_stride
        if h % stride or w % stride:
            raise InputError(f"input spatial size {(h, w)} is not divisible by output stride {stride}")
        training = self.training

        def resnet_hook(t: Tensor, slot: int) -> Tensor:
            return self.hooks['resnet'](t, epoch, training, batch_index, slot)

        low_level, deep = self.backbone(x, resnet_hook)
        fused = self.hooks['spp'](self.pyramid(deep), epoch, training, batch_index)
        feats = self.hooks['decoder'](self.decoder.features(fused, low_level), epoch, training, batch_index)
        logits = self.decoder.classifier(feats)
        return bilinear_upsample(logits, h, w)

    __call__ = forward


def build_model(cfg: ModelConfig, hooks: Optional[Sequence[HookPoint]] = None, seed: int = 0) -> SegModel:
    """按种子确定性地构建模型；同一种子两次构建的参数逐位相同"""
    by_site: Dict[str, HookPoint] = {}
    for hook in hooks or ():
        if hook.site in by_site:
            raise ConfigError(f"hook point {hook.site!r} given twice")
        by_site[hook.site] = hook
    model = SegModel(cfg, by_site, seed)
    logger.debug(f"模型构建完成: {model.parameter_count()} 个参数")
    return model


def forward_with_hooks(model: SegModel, x: Tensor, epoch: int, mode: str = 'train', batch_index: int = 0) -> Tensor:
    if mode not in ('train', 'eval'):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == 'train')
    return model.forward(x, epoch, batch_index)


def parameter_groups(model: SegModel, head_lr_multiplier: float = 10.0) -> Tuple[ParameterGroup, ParameterGroup]:
    """判别式微调：骨干 1×，金字塔 + 解码器 + 分类器 head_lr_multiplier×"""
    names = list(model.named_parameters())
    backbone = [n for n in names if n.startswith('backbone.')]
    head = [n for n in names if not n.startswith('backbone.')]
    return ParameterGroup('backbone', backbone, 1.0), ParameterGroup('head', head, head_lr_multiplier)


def load_backbone_weights(model: SegModel, manifest_path) -> int:
    """载入外部得到的骨干权重（只取 backbone. 前缀，其余忽略）"""
    tensors = checkpoint.load_tensors(manifest_path)
    loaded = model.load_state_dict(tensors, prefix='backbone.', strict=False)
    logger.info(f"已载入骨干权重 {loaded} 个张量: {manifest_path}")
    return loaded
