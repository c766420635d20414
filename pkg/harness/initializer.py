"""联合初始化：由训练视图与保留的生成视图三角化出初始高斯点云"""
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from config import BEHIND_CAMERA_EPS, DetectorConfig, InitConfig, MatchConfig
from errors import DegenerateTriangulationError, EmptyCloudError, PreconditionError
from features.detector import Feature, detect_and_describe
from features.matcher import match_descriptors
from geometry.camera import project_points
from geometry.epipolar import correspondence_arrays, triangulate_points
from harness.scene import Scene
from splat.gaussians import GaussianCloud
from vgnc.density import scene_extent
from vgnc.monitor import ViewSample

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-7
SINGLE_POINT_SCALE = 0.01       # 只有一个点时的尺度（相对场景尺度）


def _sample_colors(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """最近像素取色"""
    h, w = image.shape[:2]
    x = np.clip(np.rint(pixels[:, 0]).astype(int), 0, w - 1)
    y = np.clip(np.rint(pixels[:, 1]).astype(int), 0, h - 1)
    return image[y, x, :3]


def triangulate_pair(sample_a: ViewSample, sample_b: ViewSample,
                     features_a: List[Feature], features_b: List[Feature],
                     config: InitConfig, match_config: Optional[MatchConfig] = None
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """
    匹配并三角化一对视图

    Returns:
        (点 (N,3), 颜色 (N,3))，只保留两视图前方且重投影误差不超过阈值的点
    """
    image_a, view_a = sample_a
    image_b, view_b = sample_b
    corrs = match_descriptors(features_a, features_b, match_config)
    if not corrs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pa, pb = correspondence_arrays(corrs)
    try:
        points, valid = triangulate_points(pa, pb, view_a, view_b)
    except DegenerateTriangulationError:
        logger.debug("相机中心重合，跳过该视图对")
        return np.zeros((0, 3)), np.zeros((0, 3))

    keep = valid.copy()
    for view, pixels in ((view_a, pa), (view_b, pb)):
        projected, depth = project_points(np.where(valid[:, None], points, 0.0), view)
        with np.errstate(invalid='ignore'):
            error = np.linalg.norm(projected - pixels, axis=1)
            keep &= (depth > BEHIND_CAMERA_EPS) & (error <= config.max_reprojection_error)
    colors = 0.5 * (_sample_colors(image_a, pa) + _sample_colors(image_b, pb))
    return points[keep], colors[keep]


def merge_duplicates(points: np.ndarray, colors: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """按下标顺序贪心聚类，半径内的点合并为均值"""
    if len(points) == 0 or radius <= 0:
        return points, colors
    tree = cKDTree(points)
    assigned = np.full(len(points), -1)
    merged_points, merged_colors = [], []
    for i in range(len(points)):
        if assigned[i] >= 0:
            continue
        group = [j for j in tree.query_ball_point(points[i], radius) if assigned[j] < 0]
        assigned[group] = len(merged_points)
        merged_points.append(points[group].mean(axis=0))
        merged_colors.append(colors[group].mean(axis=0))
    return np.array(merged_points), np.array(merged_colors)


def nearest_neighbor_scales(points: np.ndarray, knn: int, fallback: float) -> np.ndarray:
    """每个点到最近 knn 个邻居的平均距离"""
    n = len(points)
    if n < 2:
        return np.full(n, fallback)
    k = min(knn, n - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(np.asarray(dist).reshape(n, -1)[:, 1:].mean(axis=1), MIN_SCALE)


def initialize_from_views(samples: Sequence[ViewSample], config: Optional[InitConfig] = None, *,
                          detector_config: Optional[DetectorConfig] = None,
                          match_config: Optional[MatchConfig] = None,
                          workers: int = 1) -> GaussianCloud:
    """对全部视图对三角化，合并重复点后构造各向同性高斯"""
    config = config or InitConfig()
    if len(samples) < 2:
        raise PreconditionError(f"初始化至少需要 2 个视图，实际 {len(samples)}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        features = list(pool.map(lambda s: detect_and_describe(s[0], detector_config), samples))
        pairs = list(combinations(range(len(samples)), 2))
        results = list(pool.map(
            lambda p: triangulate_pair(samples[p[0]], samples[p[1]], features[p[0]], features[p[1]],
                                       config, match_config), pairs))

    points = np.concatenate([r[0] for r in results]) if results else np.zeros((0, 3))
    colors = np.concatenate([r[1] for r in results]) if results else np.zeros((0, 3))
    if len(points) == 0:
        raise EmptyCloudError("所有视图对都没有可用的三角化点")

    extent = scene_extent(view for _, view in samples)
    raw_count = len(points)
    points, colors = merge_duplicates(points, colors, config.merge_fraction * extent)
    scales = config.scale_factor * nearest_neighbor_scales(points, config.knn, SINGLE_POINT_SCALE * extent)
    logger.info(f"初始化: {len(samples)} 个视图, {len(pairs)} 对, 三角化 {raw_count} 点, "
                f"合并后 {len(points)} 点")
    return GaussianCloud.isotropic(points, scales, config.initial_opacity, np.clip(colors, 0.0, 1.0))


def joint_initialize(scene: Scene, kept_generated: Optional[Sequence[int]] = (),
                     config: Optional[InitConfig] = None, *,
                     detector_config: Optional[DetectorConfig] = None,
                     match_config: Optional[MatchConfig] = None,
                     workers: int = 1) -> GaussianCloud:
    """
    联合初始化

    Args:
        scene: 已加载的场景
        kept_generated: 参与初始化的生成视图下标；为空时只用训练视图
        config: 初始化配置

    Returns:
        初始点云
    """
    samples: List[ViewSample] = list(scene.views('train'))
    generated = scene.views('generated')
    for j in (kept_generated if kept_generated is not None else ()):
        if not 0 <= j < len(generated):
            raise PreconditionError(f"生成视图下标越界: {j}")
        samples.append(generated[j])
    return initialize_from_views(samples, config, detector_config=detector_config,
                                 match_config=match_config, workers=workers)
