"""图像与标签文件的读写。

PPM(P6) / PGM(P5) 是无依赖的兜底格式，合成数据全程只用它们；
PNG / JPEG 通过 PyQt6 的 QImage 解码（真实 VOC 数据才需要）。
"""
import logging
import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PyQt6.QtGui import QImage

from core.errors import DatasetFormatError, DropRegIOError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_NETPBM_HEADER = re.compile(rb'^(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s')


def _read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise DropRegIOError(f"cannot read {path}: {e}") from e


def _write_bytes(path: PathLike, data: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(data)
    except OSError as e:
        raise DropRegIOError(f"cannot write {path}: {e}") from e


def _parse_netpbm(path: PathLike, raw: bytes) -> Tuple[str, np.ndarray]:
    match = _NETPBM_HEADER.match(raw)
    if not match:
        raise DatasetFormatError(f"{path}: not a binary PPM/PGM file")
    magic = match.group(1).decode()
    width, height, maxval = (int(match.group(i)) for i in (2, 3, 4))
    if maxval > 255:
        raise DatasetFormatError(f"{path}: 16-bit netpbm is not supported (maxval {maxval})")
    channels = 3 if magic == 'P6' else 1
    body = raw[match.end():match.end() + width * height * channels]
    if len(body) != width * height * channels:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8)
    if channels == 3:
        return magic, pixels.reshape(height, width, 3).copy()
    return magic, pixels.reshape(height, width).copy()


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """rgb: (H, W, 3) uint8"""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    """gray: (H, W) uint8，标签图无损保存"""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    _write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def _qimage_bytes(image, channels: int) -> np.ndarray:
    """按 bytesPerLine 逐行取出像素，去掉行尾对齐填充"""
    h, w = image.height(), image.width()
    stride = image.bytesPerLine()
    buf = np.frombuffer(image.constBits().asstring(stride * h), dtype=np.uint8).reshape(h, stride)
    return buf[:, :w * channels].reshape(h, w, channels).copy() if channels > 1 else buf[:, :w].copy()


def _load_qimage(path: PathLike) -> QImage:
    image = QImage(str(path))
    if image.isNull():
        raise DatasetFormatError(f"{path}: cannot decode image")
    return image


def read_rgb(path: PathLike) -> np.ndarray:
    """读取 RGB 图像，返回 (H, W, 3) uint8"""
    if Path(path).suffix.lower() == '.ppm':
        magic, pixels = _parse_netpbm(path, _read_bytes(path))
        if magic != 'P6':
            raise DatasetFormatError(f"{path}: expected a P6 image, got {magic}")
        return pixels
    image = _load_qimage(path).convertToFormat(QImage.Format.Format_RGB888)
    return _qimage_bytes(image, 3)


def read_label(path: PathLike) -> np.ndarray:
    """读取标签图，返回 (H, W) uint8，数值原样保留。

    VOC 的 PNG 是调色板图，像素值就是调色板索引 = 类别编号；
    灰度 PNG 直接取灰度值。
    """
    if Path(path).suffix.lower() == '.pgm':
        magic, pixels = _parse_netpbm(path, _read_bytes(path))
        if magic != 'P5':
            raise DatasetFormatError(f"{path}: expected a P5 label map, got {magic}")
        return pixels
    image = _load_qimage(path)
    if image.format() not in (QImage.Format.Format_Indexed8, QImage.Format.Format_Grayscale8):
        raise DatasetFormatError(f"{path}: label PNG must be 8-bit palette or grayscale, got {image.format()}")
    return _qimage_bytes(image, 1)


def write_rgb(path: PathLike, rgb: np.ndarray) -> None:
    """按扩展名写 RGB 图：.ppm 直接写，其它（.png）交给 QImage"""
    if Path(path).suffix.lower() == '.ppm':
        write_ppm(path, rgb)
        return
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    image = QImage(rgb.tobytes(), w, h, 3 * w, QImage.Format.Format_RGB888).copy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not image.save(str(path)):
        raise DropRegIOError(f"cannot write image {path}")
    logger.debug(f"已写入图像 {path}")
