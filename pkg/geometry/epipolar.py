"""对极几何模块：本质矩阵构造、分解与两视图三角化"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from config import BASELINE_EPS, ESSENTIAL_RANK_TOLERANCE, PARALLEL_EPS
from errors import (CheiralityError, DegenerateBaselineError, DegenerateTriangulationError,
                    InvalidEssentialError, PreconditionError)
from geometry.camera import CameraIntrinsics, CameraView, Pose

logger = logging.getLogger(__name__)

# 标准 W 矩阵
_W = np.array([[0.0, -1.0, 0.0],
               [1.0, 0.0, 0.0],
               [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Correspondence:
    """两幅图像间的一对像素对应"""
    pixel_a: Tuple[float, float]
    pixel_b: Tuple[float, float]

    def in_bounds(self, k_a: CameraIntrinsics, k_b: CameraIntrinsics) -> bool:
        return bool(k_a.contains(np.array(self.pixel_a))[0] and k_b.contains(np.array(self.pixel_b))[0])


@dataclass(frozen=True)
class EssentialMatrix:
    """本质矩阵"""
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'e', np.asarray(self.e, dtype=np.float64).reshape(3, 3))

    @property
    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.e, compute_uv=False)

    def is_valid(self, tol: float = ESSENTIAL_RANK_TOLERANCE) -> bool:
        """秩 2 且两个非零奇异值相等"""
        s = self.singular_values
        if s[0] <= 0:
            return False
        return s[2] / s[0] < tol and abs(s[0] - s[1]) / s[0] < tol

    def normalized(self) -> np.ndarray:
        """Frobenius 归一化、符号固定后的矩阵（用于比较）"""
        e = self.e / np.linalg.norm(self.e)
        flat = e.ravel()
        pivot = flat[np.argmax(np.abs(flat))]
        return e if pivot >= 0 else -e


def skew(v) -> np.ndarray:
    """向量的反对称矩阵 [v]×"""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def project_to_manifold(m: np.ndarray) -> EssentialMatrix:
    """投影到本质矩阵流形：奇异值替换为 (σ, σ, 0)"""
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    sigma = 0.5 * (s[0] + s[1])
    return EssentialMatrix(u @ np.diag([sigma, sigma, 0.0]) @ vt)


def essential_from_pose(rel_pose: Pose) -> EssentialMatrix:
    """E = [t]×R"""
    t = rel_pose.translation
    if np.linalg.norm(t) <= BASELINE_EPS:
        raise DegenerateBaselineError(f"基线过短: |t| = {np.linalg.norm(t):.3e}")
    return EssentialMatrix(skew(t) @ rel_pose.rotation)


def epipolar_residuals(e: EssentialMatrix, norm_a: np.ndarray, norm_b: np.ndarray) -> np.ndarray:
    """x̂_bᵀ E x̂_a（归一化齐次坐标 (N,3)）"""
    return np.einsum('ni,ij,nj->n', norm_b, e.e, norm_a)


def correspondence_arrays(corrs: Sequence[Correspondence]) -> Tuple[np.ndarray, np.ndarray]:
    """对应点列表转 (N,2) 数组对"""
    if len(corrs) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    pa = np.array([c.pixel_a for c in corrs], dtype=np.float64)
    pb = np.array([c.pixel_b for c in corrs], dtype=np.float64)
    return pa, pb


def _midpoints(center_a: np.ndarray, dir_a: np.ndarray,
               center_b: np.ndarray, dir_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    两条射线最短连线的中点（向量化）
    Returns:
        (点 (N,3), 平行掩码 (N,))
    """
    da = dir_a / np.linalg.norm(dir_a, axis=1, keepdims=True)
    db = dir_b / np.linalg.norm(dir_b, axis=1, keepdims=True)
    sin_angle = np.linalg.norm(np.cross(da, db), axis=1)
    parallel = sin_angle < PARALLEL_EPS
    w0 = center_a - center_b
    b = np.einsum('ni,ni->n', da, db)
    d = da @ w0 if w0.ndim == 1 else np.einsum('ni,ni->n', da, w0)
    e = db @ w0 if w0.ndim == 1 else np.einsum('ni,ni->n', db, w0)
    denom = np.where(parallel, 1.0, sin_angle ** 2)
    s = (b * e - d) / denom
    u = (e - b * d) / denom
    points = 0.5 * ((center_a + s[:, None] * da) + (center_b + u[:, None] * db))
    points[parallel] = np.nan
    return points, parallel


def _count_in_front(rotation: np.ndarray, translation: np.ndarray,
                    norm_a: np.ndarray, norm_b: np.ndarray) -> int:
    """A 为原点、B 为 (R,t) 时两相机前方的三角化点数"""
    center_b = -rotation.T @ translation
    points, parallel = _midpoints(np.zeros(3), norm_a, center_b, norm_b @ rotation)
    ok = ~parallel
    if not ok.any():
        return 0
    pts = points[ok]
    depth_a = pts[:, 2]
    depth_b = (pts @ rotation.T + translation)[:, 2]
    return int(np.count_nonzero((depth_a > 0) & (depth_b > 0)))


def decompose_essential(e: EssentialMatrix, corrs: Sequence[Correspondence],
                        k: CameraIntrinsics) -> Pose:
    """
    SVD 分解本质矩阵，用正深度投票从四个候选中选出 (R, t)

    Args:
        e: 本质矩阵
        corrs: 用于手性检验的对应点（至少一个）
        k: 共享内参

    Returns:
        单位平移的相对位姿
    """
    if len(corrs) == 0:
        raise PreconditionError("分解本质矩阵至少需要一个对应点")
    u, s, vt = np.linalg.svd(e.e)
    if s[0] <= 0 or s[2] / s[0] >= ESSENTIAL_RANK_TOLERANCE:
        raise InvalidEssentialError(f"本质矩阵不满足秩 2 约束: 奇异值 {s}")
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt

    pa, pb = correspondence_arrays(corrs)
    norm_a = k.normalize(pa)
    norm_b = k.normalize(pb)

    t = u[:, 2] / np.linalg.norm(u[:, 2])
    candidates: List[Tuple[np.ndarray, np.ndarray]] = [
        (u @ _W @ vt, t),
        (u @ _W @ vt, -t),
        (u @ _W.T @ vt, t),
        (u @ _W.T @ vt, -t),
    ]
    counts = [_count_in_front(r, tr, norm_a, norm_b) for r, tr in candidates]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise CheiralityError("四个候选位姿均无正深度点")
    logger.debug(f"手性投票: {counts}, 选择候选 {best}")
    rotation, translation = candidates[best]
    return Pose(rotation, translation)


def _rays(pixels: np.ndarray, view: CameraView) -> Tuple[np.ndarray, np.ndarray]:
    """像素反投影为世界坐标系射线 (中心, 方向 (N,3))"""
    directions = view.intrinsics.normalize(pixels) @ view.pose.rotation
    return view.center, directions


def triangulate_points(pixels_a: np.ndarray, pixels_b: np.ndarray,
                       view_a: CameraView, view_b: CameraView) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量中点三角化
    Returns:
        (点 (N,3)，平行射线处为 NaN; 有效掩码 (N,))
    """
    if np.linalg.norm(view_a.center - view_b.center) <= BASELINE_EPS:
        raise DegenerateTriangulationError("两相机中心重合")
    center_a, dir_a = _rays(pixels_a, view_a)
    center_b, dir_b = _rays(pixels_b, view_b)
    points, parallel = _midpoints(center_a, dir_a, center_b, dir_b)
    return points, ~parallel


def triangulate(corr: Correspondence, view_a: CameraView, view_b: CameraView) -> np.ndarray:
    """单对应点中点三角化：返回两条反投影射线最短连线的中点"""
    points, valid = triangulate_points(np.array([corr.pixel_a]), np.array([corr.pixel_b]),
                                       view_a, view_b)
    if not valid[0]:
        raise DegenerateTriangulationError("射线平行，无法三角化")
    return points[0]
