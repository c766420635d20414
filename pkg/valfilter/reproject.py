"""生成视图重投影与补洞

深度约定：每个像素按单位深度反投影，再施加相对位姿 (R, t)。
纯旋转时精确，有平移时为近似（视差误差由 σ、τ 吸收）。
"""
from typing import Tuple

import numpy as np

from config import BEHIND_CAMERA_EPS
from errors import ShapeError
from geometry.camera import CameraIntrinsics, Pose


def _as_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[:, :, None] if image.ndim == 2 else image


def warp_pixels(pixels: np.ndarray, k: CameraIntrinsics, rel_pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    源像素 (N,2) 在目标视图中的连续坐标
    Returns:
        (目标坐标 (N,2), 深度 z̃ (N,))
    """
    rays = k.normalize(pixels)
    p = rays @ rel_pose.rotation.T + rel_pose.translation
    z = p[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = k.fx * p[:, 0] / z + k.cx
        v = k.fy * p[:, 1] / z + k.cy
    return np.column_stack([u, v]), z


def reproject_generated(j_img: np.ndarray, k: CameraIntrinsics,
                        rel_pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    把生成图像按相对位姿最近邻溅射到输入视图

    Args:
        j_img: 生成图像 H×W 或 H×W×C
        k: 共享内参
        rel_pose: 生成视图相机坐标到输入视图相机坐标的位姿

    Returns:
        (重投影图像，与输入同形状; 有效掩码 H×W)
    """
    src = _as_hwc(j_img)
    h, w = k.shape
    if src.shape[:2] != (h, w):
        raise ShapeError(f"图像尺寸 {src.shape[:2]} 与内参 {(h, w)} 不一致")
    ys, xs = np.mgrid[0:h, 0:w]
    pixels = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    target, z = warp_pixels(pixels, k, rel_pose)

    ok = z > BEHIND_CAMERA_EPS
    tu = np.rint(np.where(ok, target[:, 0], -1.0))
    tv = np.rint(np.where(ok, target[:, 1], -1.0))
    ok &= (tu >= 0) & (tu <= w - 1) & (tv >= 0) & (tv <= h - 1)
    source = np.flatnonzero(ok)
    dest = (tv[ok] * w + tu[ok]).astype(np.int64)

    # 同一目标按行优先扫描顺序保留最后写入者
    dest_rev, source_rev = dest[::-1], source[::-1]
    dest_unique, first = np.unique(dest_rev, return_index=True)
    winners = source_rev[first]

    flat_src = src.reshape(h * w, -1)
    out = np.zeros_like(flat_src)
    out[dest_unique] = flat_src[winners]
    mask = np.zeros(h * w, dtype=bool)
    mask[dest_unique] = True
    out = out.reshape(src.shape)
    if np.ndim(j_img) == 2:
        out = out[:, :, 0]
    return out, mask.reshape(h, w)


def fill_holes(img: np.ndarray, mask: np.ndarray, max_radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    小空洞插值：无效像素在切比雪夫半径内至少有 2 个有效邻居时，
    以 1/距离 加权平均填充（单遍，只读取原始有效像素）
    """
    mask = np.asarray(mask, dtype=bool)
    data = _as_hwc(img)
    if data.shape[:2] != mask.shape:
        raise ShapeError(f"掩码形状 {mask.shape} 与图像 {data.shape[:2]} 不一致")
    if max_radius < 1 or mask.all():
        return np.array(img, dtype=np.float64, copy=True), mask.copy()

    h, w = mask.shape
    r = int(max_radius)
    padded = np.pad(data * mask[:, :, None], ((r, r), (r, r), (0, 0)))
    padded_mask = np.pad(mask, r)
    weight_sum = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    acc = np.zeros_like(data)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbour = padded_mask[r + dy:r + dy + h, r + dx:r + dx + w]
            weight = neighbour / np.hypot(dx, dy)
            weight_sum += weight
            count += neighbour
            acc += weight[:, :, None] * padded[r + dy:r + dy + h, r + dx:r + dx + w]

    fillable = ~mask & (count >= 2)
    out = data.copy()
    out[fillable] = acc[fillable] / weight_sum[fillable][:, None]
    if np.ndim(img) == 2:
        out = out[:, :, 0]
    return out, mask | fillable
