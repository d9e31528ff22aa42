import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from core import checkpoint
from core.config_manager import ExperimentConfig, TrainConfig
from core.datapipe import (AugmentSpec, SamplePair, Subset, VocDataset, augment_pair,
                           colorize_labels, make_batch, stratified_subsample, voc_palette)
from core.emit import emit_metrics, write_json
from core.errors import (ConfigError, ContractViolation, DropRegIOError, EmptyTargetError,
                         TrainingDivergedError)
from core.functional import softmax_cross_entropy_map
from core.image_io import write_rgb
from core.metrics import MiouSummary, confusion_counts, dataset_summary, image_miou
from core.optim import SGD, poly_lr
from core.plugin_manager import PluginManager
from core.segmodel import (HookPoint, SegModel, build_model, forward_with_hooks, load_backbone_weights,
                           parameter_groups)
from core.synthetic import SyntheticDataset, SyntheticSceneSpec, load_manifest, write_manifest
from core.tensor import ComputationTape, Tensor, backward
from plugins.base_plugin import scheduled_p
from utils.logger import attach_run_log, detach_handler
from utils.rng import augment_rng, order_rng

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[str, int, int], None]


@dataclass
class EpochMetrics:
    """epoch 从 1 开始编号；seconds 只用于日志，不参与比较也不落盘"""
    epoch: int
    train_loss: float
    val: MiouSummary
    train_miou: float
    effective_p: float
    best_image: int
    worst_image: int
    seconds: float = field(default=0.0, compare=False)

    @property
    def val_loss(self) -> float:
        return self.val.loss

    @classmethod
    def from_dict(cls, data: dict) -> 'EpochMetrics':
        data = dict(data)
        data['val'] = MiouSummary(**data['val'])
        return cls(**data)


@dataclass
class EvalResult:
    summary: MiouSummary
    mious: List[float]
    losses: List[float]


@dataclass
class ExperimentResult:
    name: str
    best: EpochMetrics
    history: List[EpochMetrics]
    checkpoint: Optional[Path] = None


def is_better(candidate: EpochMetrics, incumbent: Optional[EpochMetrics]) -> bool:
    """最佳 epoch：验证集 mean mIoU 最大；相同时取验证损失更小的；再相同保留更早的"""
    if incumbent is None:
        return True
    if candidate.val.mean != incumbent.val.mean:
        return candidate.val.mean > incumbent.val.mean
    return candidate.val.loss < incumbent.val.loss


def build_datasets(cfg: TrainConfig) -> Tuple[object, object]:
    """返回 (抽样前的训练集, 验证集)"""
    if cfg.dataset == 'voc':
        return VocDataset(cfg.dataset_root, 'train'), VocDataset(cfg.dataset_root, 'val')
    if cfg.dataset_root:
        return load_manifest(Path(cfg.dataset_root))
    spec = SyntheticSceneSpec.from_dict(cfg.synthetic)
    return SyntheticDataset(spec, cfg.train_count), SyntheticDataset(spec, cfg.val_count, offset=cfg.train_count)


class Trainer:
    def __init__(self, exp: ExperimentConfig, train_data, val_data, plugin_mgr: Optional[PluginManager] = None):
        self.exp = exp
        self.cfg = exp.train
        self.plugin_mgr = plugin_mgr or PluginManager()
        self.stop_requested = False
        if len(train_data) == 0 or len(val_data) == 0:
            raise ConfigError("training and validation data must be non-empty")

        num_classes = train_data.num_classes
        model_cfg = exp.model
        if model_cfg.num_classes != num_classes:
            logger.info(f"类别数按数据集设置为 {num_classes}（配置为 {model_cfg.num_classes}）")
            model_cfg = type(model_cfg).from_dict({**model_cfg.to_dict(), 'num_classes': num_classes})
        self.num_classes = num_classes

        self.specs = exp.hook_specs()
        hooks = [HookPoint(site, spec, self.plugin_mgr) for site, spec in self.specs.items()]
        self.model: SegModel = build_model(model_cfg, hooks, seed=self.cfg.seed)
        if self.cfg.backbone_weights:
            load_backbone_weights(self.model, self.cfg.backbone_weights)
        self.groups = parameter_groups(self.model, self.cfg.head_lr_multiplier)
        self.optimizer = SGD(self.model.named_parameters(), self.groups,
                             self.cfg.momentum, self.cfg.weight_decay)

        # 训练子集常驻内存；验证集按需读取
        self.train_pairs: List[SamplePair] = [train_data[i] for i in range(len(train_data))]
        self.val_data = val_data
        self.augment = AugmentSpec(crop_size=self.cfg.crop_size)
        self.eval_augment = self.augment.with_mode('eval')
        self.num_batches = math.ceil(len(self.train_pairs) / self.cfg.batch_size)
        self.max_iterations = self.cfg.epochs * self.num_batches

    # ---- 训练 ----

    def effective_p(self, epoch: int) -> float:
        ps = [scheduled_p(spec, epoch) for spec in self.specs.values() if spec.active]
        return max(ps) if ps else 0.0

    def _train_sample(self, index: int, epoch: int) -> SamplePair:
        pair = self.train_pairs[index]
        if not self.cfg.augment:
            return augment_pair(pair, self.eval_augment)
        return augment_pair(pair, self.augment, augment_rng(self.cfg.seed, epoch, index))

    def train_step(self, x: np.ndarray, y: np.ndarray, epoch: int, batch_index: int) -> float:
        with ComputationTape() as tape:
            logits = forward_with_hooks(self.model, Tensor(x), epoch, 'train', batch_index)
            loss = softmax_cross_entropy_map(logits, y)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(batch_index, value)
        self.model.zero_grad()
        backward(tape, loss)
        iteration = (epoch - 1) * self.num_batches + batch_index
        self.optimizer.step(poly_lr(self.cfg.base_lr, iteration, self.max_iterations, self.cfg.lr_power))
        lrs = self.optimizer.last_lrs
        if 'head' in lrs and 'backbone' in lrs and lrs['head'] != lrs['backbone'] * self.cfg.head_lr_multiplier:
            raise ContractViolation(f"head/backbone learning rates drifted: {lrs}")
        return value

    def train_epoch(self, epoch: int, progress_callback: Optional[ProgressCallback] = None) -> EpochMetrics:
        """一个 epoch：按种子打乱 → 逐 batch 增强/前向/反向/更新 → 整个验证集评估"""
        if epoch < 1:
            raise ConfigError(f"epochs are numbered from 1, got {epoch}")
        started = time.perf_counter()
        order = order_rng(self.cfg.seed, epoch).permutation(len(self.train_pairs))
        bs = self.cfg.batch_size
        losses = []
        for b in range(self.num_batches):
            if self.stop_requested:
                logger.warning("训练被中止")
                break
            if progress_callback:
                progress_callback(f"epoch {epoch} batch {b + 1}", b, self.num_batches)
            pairs = [self._train_sample(int(i), epoch) for i in order[b * bs:(b + 1) * bs]]
            x, y = make_batch(pairs)
            try:
                losses.append(self.train_step(x, y, epoch, b))
            except EmptyTargetError:
                logger.warning(f"epoch {epoch} batch {b}: 裁剪后全是忽略像素，跳过")

        val = self.evaluate(self.val_data)
        train_eval = self.evaluate(self.train_pairs)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float('nan'),
            val=val.summary,
            train_miou=train_eval.summary.mean,
            effective_p=self.effective_p(epoch),
            best_image=int(np.argmax(val.mious)),
            worst_image=int(np.argmin(val.mious)),
            seconds=time.perf_counter() - started,
        )
        logger.info(f"[{self.exp.name}] epoch {epoch}: train_loss={metrics.train_loss:.4f} "
                    f"val_loss={val.summary.loss:.4f} mIoU={val.summary.mean:.4f} "
                    f"train_mIoU={metrics.train_miou:.4f} p={metrics.effective_p:.4f}")
        return metrics

    # ---- 评估 ----

    def predict_logits(self, pairs: Sequence[SamplePair]) -> np.ndarray:
        x, _ = make_batch(pairs)
        self.model.eval()
        return self.model.forward(Tensor(x)).data

    def predict(self, pair: SamplePair) -> np.ndarray:
        """返回已做评估预处理的样本的逐像素 argmax 标签"""
        return self.predict_logits([pair])[0].argmax(axis=0).astype(np.uint8)

    def evaluate(self, data) -> EvalResult:
        """逐图像 mIoU 与交叉熵；全为忽略像素的图像跳过"""
        mious, losses = [], []
        bs = self.cfg.batch_size
        for start in range(0, len(data), bs):
            pairs = [augment_pair(data[i], self.eval_augment) for i in range(start, min(start + bs, len(data)))]
            logits = self.predict_logits(pairs)
            for pair, lg in zip(pairs, logits):
                try:
                    loss = softmax_cross_entropy_map(Tensor(lg[None]), pair.label[None].astype(np.int64))
                except EmptyTargetError:
                    logger.warning(f"样本 {pair.name} 没有有效像素，跳过")
                    continue
                pred = lg.argmax(axis=0)
                mious.append(image_miou(confusion_counts(pred, pair.label, self.num_classes)))
                losses.append(loss.item())
        return EvalResult(dataset_summary(mious, losses), mious, losses)

    # ---- 状态 ----

    def state_tensors(self) -> dict:
        return {**self.model.state_dict(), **self.optimizer.state_dict()}

    def load_state_tensors(self, tensors: dict) -> None:
        self.model.load_state_dict(tensors)
        self.optimizer.load_state_dict(tensors)


def save_probe_images(trainer: Trainer, data, indices: Sequence[int], directory: Path, prefix: str = '') -> None:
    """彩色化的预测与真值（定性结果）"""
    palette = voc_palette(max(trainer.num_classes, 21))
    for i in indices:
        pair = augment_pair(data[i], trainer.eval_augment)
        pred = trainer.predict(pair)
        write_rgb(directory / f"{prefix}{i:04d}_pred.png", colorize_labels(pred, palette))
        write_rgb(directory / f"{prefix}{i:04d}_truth.png", colorize_labels(pair.label, palette))


def _save_checkpoint(trainer: Trainer, directory: Path, exp: ExperimentConfig, epoch: int) -> Path:
    path = checkpoint.save_tensors(directory, trainer.state_tensors())
    write_json(directory / 'experiment.json', {'experiment': exp.to_dict(), 'epoch': epoch})
    return path


def run_experiment(exp: ExperimentConfig, out_dir: Path, train_data=None, val_data=None,
                   plugin_mgr: Optional[PluginManager] = None, resume: bool = False,
                   progress_callback: Optional[ProgressCallback] = None,
                   trainer_ready: Optional[Callable[[Trainer], None]] = None) -> ExperimentResult:
    """训练到结束，保存最佳 epoch 的检查点、逐 epoch 指标与探针图像"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DropRegIOError(f"cannot create output directory {out_dir}: {e}") from e
    handler = attach_run_log(out_dir / 'run.log')
    history: List[EpochMetrics] = []
    best: Optional[EpochMetrics] = None
    try:
        if train_data is None or val_data is None:
            full_train, val_data = build_datasets(exp.train)
            indices = stratified_subsample(full_train, exp.train.subsample_fraction, exp.train.seed,
                                           full_train.num_classes)
            train_data = Subset(full_train, indices)
            logger.info(f"[{exp.name}] 训练子集 {len(train_data)}/{len(full_train)}，验证集 {len(val_data)}")
            if isinstance(full_train, SyntheticDataset):
                write_manifest(out_dir / 'synthetic.json', full_train.spec, full_train.count, len(val_data))
        write_json(out_dir / 'config.json', exp.to_dict())

        trainer = Trainer(exp, train_data, val_data, plugin_mgr)
        if trainer_ready:
            trainer_ready(trainer)
        start_epoch = 1
        state_path = out_dir / 'state.json'
        if resume and state_path.exists():
            with open(state_path, 'r', encoding='utf-8') as f:
                state = json.load(f)
            history = [EpochMetrics.from_dict(m) for m in state['epochs']]
            best = EpochMetrics.from_dict(state['best_epoch']) if state.get('best_epoch') else None
            trainer.load_state_tensors(checkpoint.load_tensors(out_dir / 'last'))
            start_epoch = state['epoch'] + 1
            logger.info(f"[{exp.name}] 从 epoch {state['epoch']} 继续训练")

        probes = list(range(min(exp.train.probe_count, len(val_data))))
        for epoch in range(start_epoch, exp.train.epochs + 1):
            metrics = trainer.train_epoch(epoch, progress_callback)
            history.append(metrics)
            if is_better(metrics, best):
                best = metrics
                _save_checkpoint(trainer, out_dir / 'checkpoint', exp, epoch)
                save_probe_images(trainer, val_data, probes, out_dir / 'probes')
            if trainer.stop_requested:
                break
            if exp.train.per_epoch_probes:
                save_probe_images(trainer, val_data, probes, out_dir / 'probes', prefix=f"epoch_{epoch:03d}_")
                save_probe_images(trainer, val_data, [metrics.best_image], out_dir / 'best_worst',
                                  prefix=f"epoch_{epoch:03d}_best_")
                save_probe_images(trainer, val_data, [metrics.worst_image], out_dir / 'best_worst',
                                  prefix=f"epoch_{epoch:03d}_worst_")
            _save_checkpoint(trainer, out_dir / 'last', exp, epoch)
            write_json(state_path, {'epoch': epoch, 'epochs': history, 'best_epoch': best})
    except Exception as e:
        logger.error(f"[{exp.name}] 实验失败: {e}")
        if history:
            emit_metrics(history, out_dir, best=best, extra={'experiment': exp.name, 'completed': False})
        detach_handler(handler)
        raise

    emit_metrics(history, out_dir, best=best, extra={'experiment': exp.name, 'completed': True})
    logger.info(f"[{exp.name}] 完成，最佳 epoch {best.epoch}: mIoU={best.val.mean:.4f}")
    detach_handler(handler)
    return ExperimentResult(exp.name, best, history, out_dir / 'checkpoint')


def evaluate_checkpoint(checkpoint_dir: Path, dataset: Path) -> EvalResult:
    """用检查点目录里的实验配置重建模型，在 VOC 验证集或合成数据验证集上评估"""
    checkpoint_dir = Path(checkpoint_dir)
    try:
        with open(checkpoint_dir / 'experiment.json', 'r', encoding='utf-8') as f:
            exp = ExperimentConfig.from_dict(json.load(f)['experiment'])
    except OSError as e:
        raise DropRegIOError(f"cannot read {checkpoint_dir / 'experiment.json'}: {e}") from e
    dataset = Path(dataset)
    if dataset.suffix == '.json':
        train_data, val_data = load_manifest(dataset)
    else:
        train_data, val_data = VocDataset(dataset, 'train'), VocDataset(dataset, 'val')
    # 评估只需训练集的类别数，不读取训练图像
    trainer = Trainer(exp, Subset(train_data, [0]), val_data)
    trainer.load_state_tensors(checkpoint.load_tensors(checkpoint_dir))
    result = trainer.evaluate(val_data)
    logger.info(f"评估完成: mIoU={result.summary.mean:.4f} loss={result.summary.loss:.4f}")
    return result
