"""RANSAC 模型估计

本质矩阵：Hartley 归一化八点法，候选投影到本质流形后用 Sampson 距离（像素）打分。
纯旋转：方位向量上的 Kabsch 三点解，用重投影像素误差打分。
对应点先按坐标排序，结果与输入顺序无关。
"""
import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from config import RansacConfig
from errors import EstimationFailedError, InsufficientCorrespondencesError
from geometry.camera import CameraIntrinsics
from geometry.epipolar import Correspondence, EssentialMatrix, correspondence_arrays, project_to_manifold

logger = logging.getLogger(__name__)

ESSENTIAL_SAMPLE = 8
ROTATION_SAMPLE = 3


def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.column_stack([points, np.ones(len(points))])


def _hartley(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """平移到质心、缩放到平均距离 √2"""
    centroid = points.mean(axis=0)
    mean_dist = np.linalg.norm(points - centroid, axis=1).mean()
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    transform = np.array([[scale, 0.0, -scale * centroid[0]],
                          [0.0, scale, -scale * centroid[1]],
                          [0.0, 0.0, 1.0]])
    return _homogeneous(points) @ transform.T, transform


def eight_point(norm_a: np.ndarray, norm_b: np.ndarray) -> EssentialMatrix:
    """归一化相机坐标 (N,2)，N ≥ 8"""
    ha, ta = _hartley(norm_a)
    hb, tb = _hartley(norm_b)
    a = np.column_stack([hb[:, 0] * ha[:, 0], hb[:, 0] * ha[:, 1], hb[:, 0],
                         hb[:, 1] * ha[:, 0], hb[:, 1] * ha[:, 1], hb[:, 1],
                         ha[:, 0], ha[:, 1], np.ones(len(ha))])
    _, _, vt = np.linalg.svd(a)
    f = vt[-1].reshape(3, 3)
    return project_to_manifold(tb.T @ f @ ta)


def sampson_distance(e: EssentialMatrix, pixels_a: np.ndarray, pixels_b: np.ndarray,
                     k: CameraIntrinsics) -> np.ndarray:
    """像素单位的 Sampson 距离（通过 F = K⁻ᵀ E K⁻¹）"""
    k_inv = k.inverse
    f = k_inv.T @ e.e @ k_inv
    xa = _homogeneous(pixels_a)
    xb = _homogeneous(pixels_b)
    fxa = xa @ f.T
    ftxb = xb @ f
    num = np.einsum('ni,ni->n', xb, fxa) ** 2
    den = fxa[:, 0] ** 2 + fxa[:, 1] ** 2 + ftxb[:, 0] ** 2 + ftxb[:, 1] ** 2
    with np.errstate(divide='ignore', invalid='ignore'):
        dist = np.sqrt(num / den)
    return np.where(den > 0, dist, np.inf)


def _required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> int:
    good = inlier_ratio ** sample_size
    if good >= 1.0 - 1e-12:
        return 0
    if good <= 0.0:
        return np.iinfo(np.int64).max
    return int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - good)))


def _canonical_order(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    return np.lexsort((pb[:, 1], pb[:, 0], pa[:, 1], pa[:, 0]))


def _consensus(fit: Callable[[np.ndarray], Optional[object]],
               score: Callable[[object], np.ndarray],
               n: int, sample_size: int, config: RansacConfig):
    """
    通用 RANSAC 循环（自适应终止 + 内点重拟合）
    Returns:
        (模型, 内点掩码) 或 (None, 全 False)
    """
    rng = np.random.default_rng(config.seed)
    best_model, best_mask, best_err = None, np.zeros(n, dtype=bool), np.inf
    budget = config.max_iterations
    iteration = 0
    while iteration < budget:
        iteration += 1
        model = fit(rng.choice(n, sample_size, replace=False))
        if model is None:
            continue
        dist = score(model)
        mask = dist < config.sampson_threshold
        count = int(mask.sum())
        err = float(dist[mask].sum())
        if count > best_mask.sum() or (count == best_mask.sum() and count > 0 and err < best_err):
            best_model, best_mask, best_err = model, mask, err
            budget = min(config.max_iterations,
                         max(iteration, _required_iterations(count / n, sample_size, config.confidence)))

    # 内点重拟合，只在不减少内点时接受
    for _ in range(2):
        if best_model is None or best_mask.sum() < sample_size:
            break
        model = fit(np.flatnonzero(best_mask))
        if model is None:
            break
        mask = score(model) < config.sampson_threshold
        if mask.sum() < best_mask.sum():
            break
        best_model, best_mask = model, mask
    logger.debug(f"RANSAC: {iteration} 次迭代, 内点 {int(best_mask.sum())}/{n}")
    return best_model, best_mask


def estimate_essential_ransac(corrs: Sequence[Correspondence], k: CameraIntrinsics,
                              config: Optional[RansacConfig] = None) -> Tuple[EssentialMatrix, np.ndarray]:
    """
    RANSAC 估计本质矩阵

    Args:
        corrs: 对应点（至少 8 个）
        k: 共享内参
        config: RANSAC 配置

    Returns:
        (本质矩阵, 内点掩码，与 corrs 同序)
    """
    config = config or RansacConfig()
    n = len(corrs)
    if n < ESSENTIAL_SAMPLE:
        raise InsufficientCorrespondencesError(f"八点法至少需要 8 个对应点: {n}")
    pa, pb = correspondence_arrays(corrs)
    order = _canonical_order(pa, pb)
    pa, pb = pa[order], pb[order]
    norm_a = k.normalize(pa)[:, :2]
    norm_b = k.normalize(pb)[:, :2]

    def fit(sample):
        try:
            e = eight_point(norm_a[sample], norm_b[sample])
        except np.linalg.LinAlgError:
            return None
        return e if np.all(np.isfinite(e.e)) and np.linalg.norm(e.e) > 0 else None

    model, mask = _consensus(fit, lambda e: sampson_distance(e, pa, pb, k), n, ESSENTIAL_SAMPLE, config)
    if model is None or mask.sum() < config.min_inliers:
        raise EstimationFailedError(f"本质矩阵内点不足: {int(mask.sum())} < {config.min_inliers}")
    result = np.empty(n, dtype=bool)
    result[order] = mask
    return model, result


def kabsch(bearings_a: np.ndarray, bearings_b: np.ndarray) -> np.ndarray:
    """最小化 Σ‖b − R·a‖² 的旋转"""
    u, _, vt = np.linalg.svd(bearings_a.T @ bearings_b)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def rotation_reprojection_error(rotation: np.ndarray, pixels_a: np.ndarray, pixels_b: np.ndarray,
                                k: CameraIntrinsics) -> np.ndarray:
    """纯旋转模型下 A 像素映射到 B 后的像素误差"""
    rays = k.normalize(pixels_a) @ rotation.T
    z = rays[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = k.fx * rays[:, 0] / z + k.cx
        v = k.fy * rays[:, 1] / z + k.cy
    err = np.hypot(u - pixels_b[:, 0], v - pixels_b[:, 1])
    return np.where(z > 1e-8, err, np.inf)


def estimate_rotation_ransac(corrs: Sequence[Correspondence], k: CameraIntrinsics,
                             config: Optional[RansacConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """RANSAC 估计纯旋转 R（x_b ∝ K·R·K⁻¹·x_a），阈值沿用 sampson_threshold（像素）"""
    config = config or RansacConfig()
    n = len(corrs)
    if n < ROTATION_SAMPLE:
        raise InsufficientCorrespondencesError(f"旋转模型至少需要 3 个对应点: {n}")
    pa, pb = correspondence_arrays(corrs)
    order = _canonical_order(pa, pb)
    pa, pb = pa[order], pb[order]
    ba = k.normalize(pa)
    bb = k.normalize(pb)
    ba /= np.linalg.norm(ba, axis=1, keepdims=True)
    bb /= np.linalg.norm(bb, axis=1, keepdims=True)

    def fit(sample):
        try:
            return kabsch(ba[sample], bb[sample])
        except np.linalg.LinAlgError:
            return None

    model, mask = _consensus(fit, lambda r: rotation_reprojection_error(r, pa, pb, k),
                             n, ROTATION_SAMPLE, config)
    if model is None or mask.sum() < config.min_inliers:
        raise EstimationFailedError(f"旋转模型内点不足: {int(mask.sum())} < {config.min_inliers}")
    result = np.empty(n, dtype=bool)
    result[order] = mask
    return model, result
