"""数据管线：VOC 目录读取、成对增强、按类分层抽样、标签上色。"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage import filters

from core import image_io
from core.errors import ConfigError, DatasetError, DatasetFormatError
from core.functional import IGNORE_INDEX, interp_matrix
from utils.rng import subsample_rng

logger = logging.getLogger(__name__)

VOC_NUM_CLASSES = 21
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_IMAGE_EXTENSIONS = ('.jpg', '.png', '.ppm')
_LABEL_EXTENSIONS = ('.png', '.pgm')


@dataclass
class SamplePair:
    """image: (3, H, W) float64 ∈ [0,1]（归一化前）；label: (H, W) uint8"""
    image: np.ndarray
    label: np.ndarray
    name: str = ''

    def __post_init__(self):
        if self.image.ndim != 3 or self.label.ndim != 2 or self.image.shape[1:] != self.label.shape:
            raise DatasetFormatError(
                f"sample {self.name or '?'}: image {self.image.shape} and label {self.label.shape} do not align")


def check_label_values(label: np.ndarray, num_classes: int = VOC_NUM_CLASSES, source: str = '') -> None:
    bad = (label >= num_classes) & (label != IGNORE_INDEX)
    if bad.any():
        row, col = (int(i) for i in np.argwhere(bad)[0])
        raise DatasetFormatError(
            f"{source}: label value {int(label[row, col])} at pixel (row={row}, col={col}) "
            f"outside [0, {num_classes}) and not {IGNORE_INDEX}")


def load_voc_pair(image_path, label_path, num_classes: int = VOC_NUM_CLASSES) -> SamplePair:
    rgb = image_io.read_rgb(image_path)
    label = image_io.read_label(label_path)
    if rgb.shape[:2] != label.shape:
        raise DatasetFormatError(f"{image_path} is {rgb.shape[:2]} but {label_path} is {label.shape}")
    check_label_values(label, num_classes, str(label_path))
    image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
    return SamplePair(image, label, name=Path(image_path).stem)


def _find_file(directory: Path, stem: str, extensions: Sequence[str]) -> Path:
    for ext in extensions:
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise DatasetError(f"no file for {stem} in {directory} (tried {', '.join(extensions)})")


class VocDataset:
    """VOC2012 目录结构：JPEGImages/ + SegmentationClass/ + ImageSets/Segmentation/{split}.txt"""

    def __init__(self, root, split: str = 'train', num_classes: int = VOC_NUM_CLASSES):
        self.root = Path(root)
        self.split = split
        self.num_classes = num_classes
        list_path = self.root / 'ImageSets' / 'Segmentation' / f"{split}.txt"
        try:
            names = list_path.read_text(encoding='utf-8').split()
        except OSError as e:
            raise DatasetError(f"cannot read image list {list_path}: {e}") from e
        if not names:
            raise DatasetError(f"image list {list_path} is empty")
        self.names = names
        logger.info(f"VOC {split}: {len(names)} 张图像 ({self.root})")

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> SamplePair:
        stem = self.names[i]
        image_path = _find_file(self.root / 'JPEGImages', stem, _IMAGE_EXTENSIONS)
        label_path = _find_file(self.root / 'SegmentationClass', stem, _LABEL_EXTENSIONS)
        return load_voc_pair(image_path, label_path, self.num_classes)


class Subset:
    def __init__(self, dataset, indices: Sequence[int]):
        self.dataset = dataset
        self.indices = list(indices)

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> SamplePair:
        return self.dataset[self.indices[i]]


# ---- 增强 ----

@dataclass(frozen=True)
class AugmentSpec:
    crop_size: int = 64
    scale_range: Tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    blur_range: Tuple[float, float] = (0.0, 1.0)
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    mode: str = 'train'

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale range must be positive and ordered, got {self.scale_range}")
        if self.crop_size <= 0:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip probability must be in [0,1], got {self.flip_prob}")
        if not 0.0 <= self.blur_range[0] <= self.blur_range[1]:
            raise ConfigError(f"blur range must be non-negative and ordered, got {self.blur_range}")
        if any(s <= 0 for s in self.std):
            raise ConfigError(f"normalization std must be positive, got {self.std}")
        if self.mode not in ('train', 'eval'):
            raise ConfigError(f"augment mode must be 'train' or 'eval', got {self.mode!r}")

    def with_mode(self, mode: str) -> 'AugmentSpec':
        return AugmentSpec(self.crop_size, self.scale_range, self.flip_prob, self.blur_range,
                           self.mean, self.std, mode)


@dataclass
class AugmentDraw:
    """一次增强的全部随机量；给定它就能复现同一次变换"""
    scale: float = 1.0
    flip: bool = False
    blur_radius: float = 0.0
    crop_offset: Optional[Tuple[int, int]] = None


def draw_augmentation(spec: AugmentSpec, rng: np.random.Generator) -> AugmentDraw:
    scale = float(rng.uniform(*spec.scale_range))
    flip = bool(rng.random() < spec.flip_prob)
    radius = float(rng.uniform(*spec.blur_range))
    return AugmentDraw(scale, flip, radius)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """双线性缩放 (C, H, W)"""
    _, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()
    return interp_matrix(h, out_h) @ image @ interp_matrix(w, out_w).T


def _nearest_index(in_size: int, out_size: int) -> np.ndarray:
    # 与双线性相同的像素中心对应关系
    src = np.floor((np.arange(out_size) + 0.5) * (in_size / out_size)).astype(np.int64)
    return np.clip(src, 0, in_size - 1)


def resize_label(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """最近邻缩放，只会复制已有的类别值"""
    h, w = label.shape
    return label[np.ix_(_nearest_index(h, out_h), _nearest_index(w, out_w))]


def _pad_to(image: np.ndarray, label: np.ndarray, size: int, fill: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """在下方和右侧补到至少 size；图像用均值填充，标签用忽略值填充"""
    _, h, w = image.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    if ph == 0 and pw == 0:
        return image, label
    padded = np.empty((image.shape[0], h + ph, w + pw), dtype=np.float64)
    padded[:] = np.asarray(fill, dtype=np.float64)[:, None, None]
    padded[:, :h, :w] = image
    padded_label = np.full((h + ph, w + pw), IGNORE_INDEX, dtype=np.uint8)
    padded_label[:h, :w] = label
    return padded, padded_label


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """逐通道高斯模糊 (C, H, W)，边界反射；sigma 为 0 时原样返回"""
    if sigma <= 0:
        return image
    return filters.gaussian(image, sigma=sigma, mode='reflect', channel_axis=0, preserve_range=True)


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (image - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]


def augment_pair(pair: SamplePair, spec: AugmentSpec, rng: Optional[np.random.Generator] = None,
                 draw: Optional[AugmentDraw] = None) -> SamplePair:
    """训练：缩放 → 补边/随机裁剪 → 水平翻转 → 高斯模糊 → 归一化；评估：居中裁剪/补边 → 归一化。

    几何变换对图像和标签使用同一套像素映射。返回的 image 已归一化。
    """
    image, label = pair.image, pair.label
    size = spec.crop_size
    if spec.mode == 'train':
        if draw is None:
            if rng is None:
                raise ConfigError("train-mode augmentation needs an rng or a fixed draw")
            draw = draw_augmentation(spec, rng)
        _, h, w = image.shape
        if draw.scale != 1.0:
            out_h, out_w = max(1, int(round(h * draw.scale))), max(1, int(round(w * draw.scale)))
            image, label = resize_image(image, out_h, out_w), resize_label(label, out_h, out_w)
        image, label = _pad_to(image, label, size, spec.mean)
        _, h, w = image.shape
        if draw.crop_offset is not None:
            top, left = draw.crop_offset
        else:
            top = int(rng.integers(0, h - size + 1)) if rng is not None else (h - size) // 2
            left = int(rng.integers(0, w - size + 1)) if rng is not None else (w - size) // 2
        image = image[:, top:top + size, left:left + size]
        label = label[top:top + size, left:left + size]
        if draw.flip:
            image, label = image[:, :, ::-1], label[:, ::-1]
        image = gaussian_blur(image, draw.blur_radius)
    else:
        image, label = _pad_to(image, label, size, spec.mean)
        _, h, w = image.shape
        top, left = (h - size) // 2, (w - size) // 2
        image = image[:, top:top + size, left:left + size]
        label = label[top:top + size, left:left + size]
    return SamplePair(np.ascontiguousarray(normalize(image, spec.mean, spec.std)),
                      np.ascontiguousarray(label), pair.name)


def flip_pair(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.image[:, :, ::-1].copy(), pair.label[:, ::-1].copy(), pair.name)


def make_batch(pairs: Sequence[SamplePair]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, 3, H, W) float64 与 (N, H, W) int64"""
    images = np.stack([p.image for p in pairs])
    labels = np.stack([p.label for p in pairs]).astype(np.int64)
    return images, labels


# ---- 分层抽样 ----

def dominant_class(label: np.ndarray, num_classes: int = VOC_NUM_CLASSES) -> int:
    """像素最多的非背景类别；并列取编号小的；全是背景返回 0"""
    valid = label[(label != IGNORE_INDEX) & (label < num_classes)]
    counts = np.bincount(valid.ravel().astype(np.int64), minlength=num_classes)[1:]
    if counts.sum() == 0:
        return 0
    return int(np.argmax(counts)) + 1


def stratified_subsample(items: Union[Sequence[SamplePair], Sequence[np.ndarray]], fraction: float,
                         seed: int, num_classes: int = VOC_NUM_CLASSES) -> List[int]:
    """每张图按主类别分层，每层随机保留 ceil(fraction × 层大小) 张，返回升序下标"""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"subsample fraction must be in (0, 1], got {fraction}")
    n = len(items)
    if n == 0:
        raise DatasetError("cannot subsample an empty dataset")
    strata = {}
    for i in range(n):
        item = items[i]
        label = item.label if isinstance(item, SamplePair) else np.asarray(item)
        strata.setdefault(dominant_class(label, num_classes), []).append(i)

    rng = subsample_rng(seed)
    chosen: List[int] = []
    for cls in sorted(strata):
        members = strata[cls]
        keep = math.ceil(round(fraction * len(members), 9))
        chosen.extend(int(i) for i in rng.choice(members, size=keep, replace=False))
    logger.debug(f"分层抽样 fraction={fraction}: {n} -> {len(chosen)}")
    return sorted(chosen)


# ---- 上色 ----

def voc_palette(n: int = 256) -> np.ndarray:
    """VOC 标准调色板：类别编号的比特依次散布到 R/G/B 的高位"""
    palette = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette[i] = (r, g, b)
    return palette


def colorize_labels(label: np.ndarray, palette: Optional[np.ndarray] = None) -> np.ndarray:
    """逐像素查调色板，忽略像素涂黑；返回 (H, W, 3) uint8"""
    if palette is None:
        palette = voc_palette(VOC_NUM_CLASSES)
    palette = np.asarray(palette, dtype=np.uint8)
    label = np.asarray(label)
    ignored = label == IGNORE_INDEX
    ids = np.where(ignored, 0, label).astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(palette)):
        raise DatasetFormatError(f"class id {int(ids.max())} has no palette entry (palette size {len(palette)})")
    rgb = palette[ids]
    rgb[ignored] = 0
    return rgb
