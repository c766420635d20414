"""COLMAP 文本模型导入（cameras.txt / images.txt）"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from errors import ColmapFormatError, UnsupportedCameraError
from geometry.camera import CameraIntrinsics, Pose
from harness.scene import SceneEntry, SceneManifest

logger = logging.getLogger(__name__)

SUPPORTED_MODELS = ('PINHOLE', 'SIMPLE_PINHOLE')
# COLMAP 的像素原点在左上像素的左上角
PIXEL_CENTER_OFFSET = 0.5


@dataclass(frozen=True)
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: Tuple[float, ...]

    def intrinsics(self) -> CameraIntrinsics:
        if self.model == 'PINHOLE':
            fx, fy, cx, cy = self.params
        else:
            f, cx, cy = self.params
            fx = fy = f
        return CameraIntrinsics(fx, fy, cx - PIXEL_CENTER_OFFSET, cy - PIXEL_CENTER_OFFSET,
                                self.width, self.height)


@dataclass(frozen=True)
class ColmapImage:
    image_id: int
    qvec: Tuple[float, float, float, float]
    tvec: Tuple[float, float, float]
    camera_id: int
    name: str


def _data_lines(path):
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            yield lineno, raw.rstrip('\n')


def read_cameras_text(path) -> Dict[int, ColmapCamera]:
    cameras = {}
    for lineno, raw in _data_lines(path):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        elems = line.split()
        if len(elems) < 4:
            raise ColmapFormatError(f"{path} 第 {lineno} 行字段不足: {line}")
        model = elems[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedCameraError(f"不支持的相机模型 {model}（仅支持 {', '.join(SUPPORTED_MODELS)}）")
        try:
            camera = ColmapCamera(int(elems[0]), model, int(elems[2]), int(elems[3]),
                                  tuple(float(v) for v in elems[4:]))
        except ValueError:
            raise ColmapFormatError(f"{path} 第 {lineno} 行数值无效: {line}") from None
        expected = 4 if model == 'PINHOLE' else 3
        if len(camera.params) != expected:
            raise ColmapFormatError(f"{path} 第 {lineno} 行 {model} 需要 {expected} 个参数")
        cameras[camera.camera_id] = camera
    return cameras


def read_images_text(path) -> Dict[int, ColmapImage]:
    """每幅图像占两行，第二行为二维点（可为空，这里不使用）"""
    images = {}
    expect_points = False
    for lineno, raw in _data_lines(path):
        if expect_points:
            expect_points = False
            continue
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        elems = line.split()
        if len(elems) != 10:
            raise ColmapFormatError(f"{path} 第 {lineno} 行应为 10 个字段: {line}")
        try:
            image = ColmapImage(int(elems[0]), tuple(float(v) for v in elems[1:5]),
                                tuple(float(v) for v in elems[5:8]), int(elems[8]), elems[9])
        except ValueError:
            raise ColmapFormatError(f"{path} 第 {lineno} 行数值无效: {line}") from None
        images[image.image_id] = image
        expect_points = True
    return images


def import_colmap(cameras_path, images_path, image_dir: str = 'images',
                  test_every: int = 0) -> SceneManifest:
    """
    导入 COLMAP 文本模型为场景清单

    Args:
        cameras_path: cameras.txt
        images_path: images.txt
        image_dir: 清单中图像路径的前缀目录
        test_every: >0 时按名称排序后每 test_every 张取一张作测试视图

    q 与 -q 表示同一旋转：导入时只保留旋转矩阵，写出清单时四元数统一为 w ≥ 0，
    因此 COLMAP 中 w < 0 的条目在清单里符号相反，位姿不变。

    Returns:
        SceneManifest（可能没有条目，加载时再校验）
    """
    cameras = read_cameras_text(cameras_path)
    images = read_images_text(images_path)
    if not cameras:
        raise ColmapFormatError(f"{cameras_path} 中没有相机")
    distinct = {(c.model, c.width, c.height, c.params) for c in cameras.values()}
    if len(distinct) > 1:
        raise ColmapFormatError(f"需要单一共享相机，实际有 {len(distinct)} 种")
    camera = next(iter(cameras.values()))
    intrinsics = camera.intrinsics()

    entries: List[SceneEntry] = []
    for n, image in enumerate(sorted(images.values(), key=lambda im: im.name)):
        if image.camera_id not in cameras:
            raise ColmapFormatError(f"图像 {image.name} 引用了不存在的相机 {image.camera_id}")
        q = np.asarray(image.qvec)
        pose = Pose.from_quaternion(q / np.linalg.norm(q), image.tvec)
        role = 'test' if test_every > 0 and n % test_every == 0 else 'train'
        path = str(Path(image_dir) / image.name).replace('\\', '/') if image_dir else image.name
        entries.append(SceneEntry(role, path, pose))
    logger.info(f"导入 COLMAP 模型: {len(entries)} 幅图像, 相机 {camera.model} {camera.width}x{camera.height}")
    return SceneManifest(intrinsics, entries)
