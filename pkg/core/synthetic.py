"""合成几何图形分割数据：背景 + k 类形状（圆盘、矩形、三角形、圆环）。

同一 (seed, index) 总是生成同一对图像/标签；第 index 张图的主类为
1 + index % k，保证每类都有足够多的场景以它为主。
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from core.datapipe import SamplePair
from core.errors import ConfigError, DatasetFormatError, DropRegIOError
from core.image_io import write_pgm, write_ppm
from utils.rng import synthetic_rng

logger = logging.getLogger(__name__)

SHAPE_KINDS = ('disk', 'rectangle', 'triangle', 'ring')
MIN_CLASS_FRACTION = 0.01
MAX_ATTEMPTS = 64

# 背景 + 每类一个基色，纹理噪声叠加在上面
BACKGROUND_COLOR = (0.45, 0.45, 0.45)
CLASS_COLORS = (
    (0.85, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.30, 0.85),
    (0.90, 0.80, 0.15),
    (0.70, 0.25, 0.80),
    (0.15, 0.80, 0.80),
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: int = 64
    classes: Tuple[str, ...] = SHAPE_KINDS
    shapes_per_scene: Tuple[int, int] = (1, 3)
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'classes', tuple(self.classes))
        object.__setattr__(self, 'shapes_per_scene', tuple(self.shapes_per_scene))
        if len(self.classes) < 2:
            raise ConfigError(f"synthetic scenes need at least 2 shape classes, got {self.classes}")
        if len(self.classes) > len(CLASS_COLORS):
            raise ConfigError(f"at most {len(CLASS_COLORS)} shape classes are supported")
        unknown = set(self.classes) - set(SHAPE_KINDS)
        if unknown:
            raise ConfigError(f"unknown shape kinds {sorted(unknown)}, expected from {SHAPE_KINDS}")
        lo, hi = self.shapes_per_scene
        if not 1 <= lo <= hi:
            raise ConfigError(f"shapes_per_scene must satisfy 1 <= lo <= hi, got {self.shapes_per_scene}")
        if self.canvas < 16:
            raise ConfigError(f"canvas must be >= 16, got {self.canvas}")
        if self.noise < 0:
            raise ConfigError(f"noise amplitude must be non-negative, got {self.noise}")

    @property
    def num_classes(self) -> int:
        """包括背景在内的类别数"""
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        data = asdict(self)
        data['classes'] = list(self.classes)
        data['shapes_per_scene'] = list(self.shapes_per_scene)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'SyntheticSceneSpec':
        try:
            return cls(**(data or {}))
        except TypeError as e:
            raise ConfigError(f"invalid synthetic spec {data}: {e}") from e


@dataclass(frozen=True)
class Shape:
    """class_id 从 1 开始；(cx, cy) 为中心像素坐标，radius 为外接半径"""
    class_id: int
    cx: float
    cy: float
    radius: float
    aspect: float = 1.0


def shape_mask(kind: str, shape: Shape, canvas: int) -> np.ndarray:
    """以像素中心 (x, y) 为采样点的精确光栅化"""
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    dx, dy = xs - shape.cx, ys - shape.cy
    r = shape.radius
    if kind == 'disk':
        return dx * dx + dy * dy <= r * r
    if kind == 'ring':
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == 'rectangle':
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * shape.aspect)
    if kind == 'triangle':
        # 顶点朝上的等腰三角形，底边在 cy + r
        depth = dy + r
        return (depth >= 0) & (dy <= r) & (np.abs(dx) <= depth / 2.0)
    raise ConfigError(f"unknown shape kind {kind!r}")


def render_scene(spec: SyntheticSceneSpec, shapes: Sequence[Shape],
                 rng: np.random.Generator = None) -> Tuple[np.ndarray, np.ndarray]:
    """由后往前绘制，重叠处标签取最上层形状的类别。

    返回 image (3, H, W) ∈ [0,1] 与 label (H, W) uint8。
    """
    n = spec.canvas
    label = np.zeros((n, n), dtype=np.uint8)
    colors = np.empty((3, n, n), dtype=np.float64)
    colors[:] = np.asarray(BACKGROUND_COLOR)[:, None, None]
    for shape in shapes:
        mask = shape_mask(spec.classes[shape.class_id - 1], shape, n)
        label[mask] = shape.class_id
        colors[:, mask] = np.asarray(CLASS_COLORS[shape.class_id - 1])[:, None]
    if spec.noise > 0 and rng is not None:
        colors = colors + spec.noise * rng.standard_normal(colors.shape)
    return np.clip(colors, 0.0, 1.0), label


def _dominant_class(label: np.ndarray, num_classes: int) -> int:
    counts = np.bincount(label.ravel(), minlength=num_classes)[1:num_classes]
    if counts.sum() == 0:
        return 0
    return int(np.argmax(counts)) + 1


def _scene_ok(label: np.ndarray, classes_drawn: Sequence[int], primary: int, num_classes: int) -> bool:
    if _dominant_class(label, num_classes) != primary:
        return False
    min_pixels = MIN_CLASS_FRACTION * label.size
    counts = np.bincount(label.ravel(), minlength=num_classes)
    return all(counts[c] >= min_pixels for c in set(classes_drawn))


def _draw_shape(rng: np.random.Generator, class_id: int, canvas: int, primary: bool) -> Shape:
    lo, hi = (0.20, 0.34) if primary else (0.08, 0.18)
    radius = float(rng.uniform(lo, hi) * canvas)
    margin = radius * 0.6
    cx = float(rng.uniform(margin, canvas - margin))
    cy = float(rng.uniform(margin, canvas - margin))
    aspect = float(rng.uniform(0.6, 1.0))
    return Shape(class_id, cx, cy, radius, aspect)


def generate_synthetic_sample(spec: SyntheticSceneSpec, index: int):
    """生成第 index 个场景，返回 SamplePair"""
    if index < 0:
        raise ConfigError(f"scene index must be non-negative, got {index}")
    k = len(spec.classes)
    primary = 1 + index % k
    rng = synthetic_rng(spec.seed, index)
    lo, hi = spec.shapes_per_scene
    for _ in range(MAX_ATTEMPTS):
        n_shapes = int(rng.integers(lo, hi + 1))
        others = [int(c) for c in rng.integers(1, k + 1, size=n_shapes - 1)]
        # 主类最后画，位于最上层
        shapes = [_draw_shape(rng, c, spec.canvas, False) for c in others]
        shapes.append(_draw_shape(rng, primary, spec.canvas, True))
        _, label = render_scene(spec, shapes)
        if _scene_ok(label, others + [primary], primary, spec.num_classes):
            break
    else:
        centre = spec.canvas / 2.0
        shapes = [Shape(primary, centre, centre, 0.3 * spec.canvas)]
        logger.debug(f"场景 {index} 多次重试未满足类别约束，退化为单个居中形状")
    image, label = render_scene(spec, shapes, rng)
    return SamplePair(image, label, name=f"synthetic_{index:06d}")


class SyntheticDataset:
    """按需生成的合成数据集；训练集 [offset, offset + count)"""

    def __init__(self, spec: SyntheticSceneSpec, count: int, offset: int = 0):
        if count < 1:
            raise ConfigError(f"synthetic dataset needs count >= 1, got {count}")
        self.spec = spec
        self.count = count
        self.offset = offset

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int):
        if not 0 <= i < self.count:
            raise IndexError(i)
        return generate_synthetic_sample(self.spec, self.offset + i)

    def dominant_classes(self) -> List[int]:
        return [_dominant_class(self[i].label, self.num_classes) for i in range(self.count)]


def write_manifest(path: Path, spec: SyntheticSceneSpec, count: int, val_count: int) -> None:
    manifest = {'format': 'dropreg-synthetic', 'spec': spec.to_dict(),
                'count': count, 'val_count': val_count, 'seed': spec.seed}
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=4)
    except OSError as e:
        raise DropRegIOError(f"cannot write synthetic manifest {path}: {e}") from e


def load_manifest(path: Path) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """读取 synthetic.json，返回 (训练集, 验证集)；验证集紧接在训练集之后编号"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except OSError as e:
        raise DropRegIOError(f"cannot read synthetic manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid synthetic manifest {path}: {e}") from e
    if manifest.get('format') != 'dropreg-synthetic':
        raise DatasetFormatError(f"{path} is not a synthetic dataset manifest")
    spec_data = dict(manifest.get('spec') or {})
    spec_data['seed'] = manifest.get('seed', spec_data.get('seed', 0))
    spec = SyntheticSceneSpec.from_dict(spec_data)
    count = int(manifest['count'])
    return SyntheticDataset(spec, count), SyntheticDataset(spec, int(manifest['val_count']), offset=count)


def export_netpbm(dataset: SyntheticDataset, root: Path, split: str = 'train') -> Path:
    """把合成数据写成 VOC 目录结构（PPM 图像 + PGM 标签），可直接交给 VocDataset"""
    root = Path(root)
    names = []
    for i in range(len(dataset)):
        pair = dataset[i]
        write_ppm(root / 'JPEGImages' / f"{pair.name}.ppm",
                  np.round(pair.image.transpose(1, 2, 0) * 255.0).astype(np.uint8))
        write_pgm(root / 'SegmentationClass' / f"{pair.name}.pgm", pair.label)
        names.append(pair.name)
    list_path = root / 'ImageSets' / 'Segmentation' / f"{split}.txt"
    try:
        list_path.parent.mkdir(parents=True, exist_ok=True)
        list_path.write_text('\n'.join(names) + '\n', encoding='utf-8')
    except OSError as e:
        raise DropRegIOError(f"cannot write image list {list_path}: {e}") from e
    logger.info(f"已导出 {len(names)} 个合成样本到 {root} ({split})")
    return root
