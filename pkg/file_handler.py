"""文件处理模块

一次命令行运行的所有写操作都经过 FileHandler，路径限制在输出目录内。
PNG 编解码使用 QImage（无需 QApplication）。
"""
import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PyQt5.QtGui import QImage

from config import BUFFER_SIZE
from errors import OutputPathError

PathLike = Union[str, Path]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0,1] 浮点图像转 8 位"""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: PathLike, image: np.ndarray):
    """保存 H×W×C 浮点图像为 8 位 PNG（C=1 灰度，C=3 彩色）"""
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c == 1:
        data = np.ascontiguousarray(arr[:, :, 0]).tobytes()
        qimg = QImage(data, w, h, w, QImage.Format_Grayscale8)
    else:
        data = np.ascontiguousarray(arr[:, :, :3]).tobytes()
        qimg = QImage(data, w, h, 3 * w, QImage.Format_RGB888)
    if not qimg.save(str(path), 'PNG'):
        raise IOError(f"写入 PNG 失败: {path}")


def load_png(path: PathLike) -> np.ndarray:
    """读取 PNG 为 [0,1] 浮点 H×W×C 数组"""
    qimg = QImage(str(path))
    if qimg.isNull():
        raise IOError(f"无法读取图像: {path}")
    if qimg.format() == QImage.Format_Grayscale8:
        channels = 1
    else:
        qimg = qimg.convertToFormat(QImage.Format_RGB888)
        channels = 3
    w, h = qimg.width(), qimg.height()
    stride = qimg.bytesPerLine()
    ptr = qimg.constBits()
    ptr.setsize(stride * h)
    raw = np.frombuffer(ptr, dtype=np.uint8).reshape(h, stride)
    arr = raw[:, :w * channels].reshape(h, w, channels).copy()
    return arr.astype(np.float64) / 255.0


def atomic_write_text(filepath: Path, text: str):
    """原子写入文本文件"""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    temp_file = filepath.with_suffix(filepath.suffix + '.tmp')
    try:
        with open(temp_file, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        temp_file.replace(filepath)
    except Exception:
        if temp_file.exists():
            temp_file.unlink()
        raise


def atomic_write_json(filepath: Path, data: dict):
    """原子写入 JSON 文件"""
    atomic_write_text(filepath, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True))


def read_json(filepath: Path, strict: bool = False) -> Optional[dict]:
    """
    读取 JSON 文件
    Args:
        strict: 为 True 时内容损坏抛出 json.JSONDecodeError，否则返回 None
    """
    filepath = Path(filepath)
    if filepath.exists():
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError:
            if strict:
                raise
        except IOError:
            pass
    return None


def format_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """格式化 CSV 文本（\\n 换行）"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


class FileHandler:
    """输出目录文件处理器"""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir).resolve()
        self.out_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def get_file_hash(filepath: PathLike) -> str:
        """计算文件MD5哈希值"""
        hash_md5 = hashlib.md5()
        with open(filepath, 'rb') as f:
            for chunk in iter(lambda: f.read(BUFFER_SIZE), b''):
                hash_md5.update(chunk)
        return hash_md5.hexdigest()

    def resolve(self, name: PathLike) -> Path:
        """解析输出目录下的相对路径，拒绝越界"""
        path = (self.out_dir / name).resolve()
        if path != self.out_dir and self.out_dir not in path.parents:
            raise OutputPathError(f"路径越出输出目录: {name}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def subdir(self, name: PathLike) -> 'FileHandler':
        """子目录处理器"""
        return FileHandler(self.resolve(name))

    def write_text(self, name: PathLike, text: str) -> Path:
        path = self.resolve(name)
        atomic_write_text(path, text)
        return path

    def write_json(self, name: PathLike, data: dict) -> Path:
        path = self.resolve(name)
        atomic_write_json(path, data)
        return path

    def write_csv(self, name: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        return self.write_text(name, format_csv(header, rows))

    def write_png(self, name: PathLike, image: np.ndarray) -> Path:
        path = self.resolve(name)
        save_png(path, image)
        return path
