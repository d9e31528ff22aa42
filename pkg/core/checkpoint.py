"""张量检查点格式。

单个张量记录（little-endian）：
    magic "DRT1" | 4 × u64 维度 | 维度乘积 × f64 数值
参数文件 = manifest.json（name, offset 列表）+ 一个把所有记录首尾相接的 blob。
低于 4 维的张量在前面补 1 存储，读取时按 manifest 里的原始形状还原。
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from core.errors import DatasetFormatError, DropRegIOError

logger = logging.getLogger(__name__)

MAGIC = b'DRT1'
HEADER = struct.Struct('<4s4Q')
MANIFEST_NAME = 'manifest.json'
BLOB_NAME = 'params.bin'


def encode_tensor(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 4:
        raise ValueError(f"DRT1 stores at most 4 extents, got shape {arr.shape}")
    extents = (1,) * (4 - arr.ndim) + tuple(arr.shape)
    return HEADER.pack(MAGIC, *extents) + arr.astype('<f8').tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """返回 (4 维数组, 下一条记录的偏移)"""
    if len(buf) < offset + HEADER.size:
        raise DatasetFormatError(f"truncated DRT1 header at offset {offset}")
    magic, *extents = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset {offset}")
    count = int(np.prod(extents))
    start = offset + HEADER.size
    end = start + 8 * count
    if len(buf) < end:
        raise DatasetFormatError(f"truncated DRT1 payload at offset {offset}")
    values = np.frombuffer(buf, dtype='<f8', count=count, offset=start).astype(np.float64)
    return values.reshape(extents), end


def save_tensors(directory: Path, tensors: Mapping[str, np.ndarray]) -> Path:
    """按给定顺序写 manifest + blob，返回 manifest 路径"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        entries: List[Dict] = []
        offset = 0
        with open(directory / BLOB_NAME, 'wb') as f:
            for name, values in tensors.items():
                record = encode_tensor(values)
                entries.append({'name': name, 'offset': offset, 'shape': list(np.shape(values))})
                f.write(record)
                offset += len(record)
        manifest = {'format': 'DRT1', 'blob': BLOB_NAME, 'tensors': entries}
        with open(directory / MANIFEST_NAME, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
    except OSError as e:
        raise DropRegIOError(f"cannot write checkpoint to {directory}: {e}") from e
    return directory / MANIFEST_NAME


def load_tensors(manifest_path: Path) -> Dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        blob = (manifest_path.parent / manifest.get('blob', BLOB_NAME)).read_bytes()
    except OSError as e:
        raise DropRegIOError(f"cannot read checkpoint {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid manifest {manifest_path}: {e}") from e

    tensors = {}
    for entry in manifest['tensors']:
        values, _ = decode_tensor(blob, int(entry['offset']))
        shape = tuple(entry.get('shape', values.shape))
        tensors[entry['name']] = values.reshape(shape)
    return tensors
