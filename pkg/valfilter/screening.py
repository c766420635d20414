"""生成视图幻觉筛选

对每张生成图像 J_j 与每张输入图像 I_i：匹配特征 → 估计相对位姿 →
把 J_j 重投影到 I_i → 补洞 → 置信度图 → 低置信度像素数 N_{i←j}。
N_j^min = min_i N_{i←j} ≤ τ 的生成图像保留为验证集。
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import REPORT_HEADER, DetectorConfig, FilterConfig, MatchConfig, RansacConfig
from errors import (CheiralityError, DegenerateTriangulationError, EstimationFailedError,
                    InsufficientCorrespondencesError, InvalidEssentialError, PreconditionError,
                    ReportFormatError, ShapeError)
from features.detector import Feature, detect_and_describe
from features.matcher import match_descriptors, write_matches
from features.ransac import (estimate_essential_ransac, estimate_rotation_ransac, kabsch,
                             rotation_reprojection_error)
from file_handler import FileHandler
from geometry.camera import CameraIntrinsics, CameraView, Pose
from geometry.epipolar import Correspondence, correspondence_arrays, decompose_essential, triangulate_points
from valfilter.confidence import ConfidenceMap, confidence_map, low_confidence_count
from valfilter.reproject import fill_holes, reproject_generated

logger = logging.getLogger(__name__)

MODEL_ESSENTIAL = 'essential'
MODEL_ROTATION = 'rotation'
MODEL_FAILED = 'failed'


@dataclass
class PairGeometry:
    """生成视图 → 输入视图的相对几何"""
    model: str
    pose: Optional[Pose]
    inliers: int
    matches: int
    correspondences: List[Correspondence] = field(default_factory=list, repr=False)
    inlier_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.pose is not None


@dataclass
class PairScore:
    """一对 (生成, 输入) 的评分"""
    gen_index: int
    input_index: int
    n_low: int
    geometry: PairGeometry
    confidence: Optional[ConfidenceMap] = field(default=None, repr=False)


@dataclass
class FilterEntry:
    """一张生成图像的筛选结论"""
    gen_index: int
    closest_input: int
    n_min: int
    n_total: int
    kept: bool
    scores: Tuple[int, ...] = ()


@dataclass
class FilterReport:
    """筛选报告"""
    tau: float
    n_total: int
    entries: List[FilterEntry] = field(default_factory=list)
    pairs: Dict[Tuple[int, int], PairScore] = field(default_factory=dict, repr=False)

    @property
    def kept_indices(self) -> List[int]:
        return [e.gen_index for e in self.entries if e.kept]

    def to_csv_rows(self) -> List[Tuple]:
        return [(e.gen_index, e.closest_input, e.n_min, e.n_total, int(e.kept)) for e in self.entries]


# ==================== 位姿 ====================

def _median_depth(pose: Pose, corrs: Sequence[Correspondence], k: CameraIntrinsics) -> Optional[float]:
    """单位平移下内点三角化深度的中位数（生成视图坐标系）"""
    if not corrs:
        return None
    pa, pb = correspondence_arrays(corrs)
    try:
        points, valid = triangulate_points(pa, pb, CameraView(k, Pose.identity()), CameraView(k, pose))
    except DegenerateTriangulationError:
        return None
    points = points[valid]
    depth_a = points[:, 2]
    depth_b = (points @ pose.rotation.T + pose.translation)[:, 2]
    good = (depth_a > 0) & (depth_b > 0)
    if not good.any():
        return None
    return float(np.median(depth_a[good]))


def _residual_parallax(corrs: Sequence[Correspondence], k: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """对应点上的最小二乘纯旋转及逐点像素残差"""
    pa, pb = correspondence_arrays(corrs)
    ba, bb = k.normalize(pa), k.normalize(pb)
    ba /= np.linalg.norm(ba, axis=1, keepdims=True)
    bb /= np.linalg.norm(bb, axis=1, keepdims=True)
    rotation = kabsch(ba, bb)
    return rotation, rotation_reprojection_error(rotation, pa, pb, k)


def estimate_pair_geometry(gen_features: List[Feature], input_features: List[Feature],
                           k: CameraIntrinsics, filter_config: Optional[FilterConfig] = None,
                           match_config: Optional[MatchConfig] = None,
                           ransac_config: Optional[RansacConfig] = None) -> PairGeometry:
    """
    估计生成视图相机坐标到输入视图相机坐标的位姿

    同时拟合本质矩阵模型和纯旋转模型，以下情况取 (R, 0)：
    旋转模型解释了本质矩阵内点的 rotation_preference 以上；本质矩阵内点上
    最小二乘旋转的残差中位数不超过 max_rotation_parallax；本质矩阵失败。
    否则取本质矩阵位姿，平移按 warp_depth 处理（默认单位平移、d=1）。

    Args:
        gen_features: 生成图像特征（对应点 A 侧）
        input_features: 输入图像特征（对应点 B 侧）
        k: 共享内参
        filter_config: 筛选配置（warp_depth、rotation_preference、max_rotation_parallax）

    Returns:
        PairGeometry；两个模型都失败时 pose 为 None
    """
    filter_config = filter_config or FilterConfig()
    corrs = match_descriptors(gen_features, input_features, match_config)

    essential = None
    try:
        e, e_mask = estimate_essential_ransac(corrs, k, ransac_config)
        inlier_corrs = [c for c, m in zip(corrs, e_mask) if m]
        essential = (decompose_essential(e, inlier_corrs, k), e_mask, inlier_corrs)
    except (InsufficientCorrespondencesError, EstimationFailedError,
            InvalidEssentialError, CheiralityError, PreconditionError) as exc:
        logger.debug(f"本质矩阵模型失败: {exc}")

    rotation = None
    try:
        rotation = estimate_rotation_ransac(corrs, k, ransac_config)
    except (InsufficientCorrespondencesError, EstimationFailedError) as exc:
        logger.debug(f"旋转模型失败: {exc}")

    if essential is None and rotation is None:
        return PairGeometry(MODEL_FAILED, None, 0, len(corrs), corrs, None)

    if rotation is not None and (essential is None or
                                 rotation[1].sum() >= filter_config.rotation_preference * essential[1].sum()):
        r, r_mask = rotation
        return PairGeometry(MODEL_ROTATION, Pose(r, np.zeros(3)), int(r_mask.sum()), len(corrs), corrs, r_mask)

    pose, e_mask, inlier_corrs = essential
    r, residual = _residual_parallax(inlier_corrs, k)
    if np.median(residual) <= filter_config.max_rotation_parallax:
        r_mask = e_mask.copy()
        r_mask[np.flatnonzero(e_mask)] = residual <= filter_config.max_rotation_parallax
        logger.debug(f"残差视差中位数 {np.median(residual):.3f}px，按纯旋转处理")
        return PairGeometry(MODEL_ROTATION, Pose(r, np.zeros(3)), int(r_mask.sum()), len(corrs), corrs, r_mask)

    if filter_config.warp_depth == 'median':
        depth = _median_depth(pose, inlier_corrs, k)
        if depth is not None:
            pose = Pose(pose.rotation, pose.translation / depth)
    return PairGeometry(MODEL_ESSENTIAL, pose, int(e_mask.sum()), len(corrs), corrs, e_mask)


# ==================== 筛选 ====================

def score_pair(input_img: np.ndarray, gen_img: np.ndarray, geometry: PairGeometry,
               k: CameraIntrinsics, config: FilterConfig) -> Tuple[int, Optional[ConfidenceMap]]:
    """N_{i←j}；几何失败时为 H·W"""
    if not geometry.ok:
        return k.width * k.height, None
    warped, mask = reproject_generated(gen_img, k, geometry.pose)
    warped, mask = fill_holes(warped, mask, config.max_fill_radius)
    conf = confidence_map(input_img, warped, mask, config.sigma)
    return low_confidence_count(conf, config.theta), conf


def filter_generated_set(inputs: Sequence[np.ndarray], generated: Sequence[np.ndarray],
                         k: CameraIntrinsics, config: Optional[FilterConfig] = None, *,
                         detector_config: Optional[DetectorConfig] = None,
                         match_config: Optional[MatchConfig] = None,
                         ransac_config: Optional[RansacConfig] = None,
                         workers: int = 1, keep_details: bool = False,
                         on_pair_done: Optional[Callable[[int, int, int], None]] = None
                         ) -> Tuple[List[int], FilterReport]:
    """
    筛选生成图像

    Args:
        inputs: 输入（训练）图像
        generated: 生成图像
        k: 全部图像共享的内参
        config: 筛选配置
        workers: 线程数；结果按下标组装，与线程数无关
        keep_details: 在报告中保留逐对几何与置信度图
        on_pair_done: 回调 (gen_index, input_index, n_low)

    Returns:
        (保留的生成图像下标, FilterReport)
    """
    config = config or FilterConfig()
    if len(inputs) == 0:
        raise PreconditionError("至少需要一张输入图像")
    h, w = k.shape
    n_total = h * w
    tau = config.tau_fraction * n_total
    report = FilterReport(tau=tau, n_total=n_total)
    if len(generated) == 0:
        return [], report
    for img in list(inputs) + list(generated):
        if np.shape(img)[:2] != (h, w):
            raise ShapeError(f"图像尺寸 {np.shape(img)[:2]} 与内参 {(h, w)} 不一致")

    def detect(img):
        return detect_and_describe(img, detector_config)

    def run_pair(j: int, i: int) -> PairScore:
        geometry = estimate_pair_geometry(gen_features[j], input_features[i], k,
                                          config, match_config, ransac_config)
        n_low, conf = score_pair(inputs[i], generated[j], geometry, k, config)
        if not geometry.ok:
            logger.debug(f"生成图像 {j} → 输入 {i}: 位姿估计失败，N = {n_low}")
        if on_pair_done:
            on_pair_done(j, i, n_low)
        return PairScore(j, i, n_low, geometry, conf if keep_details else None)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        input_features = list(pool.map(detect, inputs))
        gen_features = list(pool.map(detect, generated))
        futures = {(j, i): pool.submit(run_pair, j, i)
                   for j in range(len(generated)) for i in range(len(inputs))}
        scores = {key: future.result() for key, future in futures.items()}

    for j in range(len(generated)):
        per_input = tuple(scores[(j, i)].n_low for i in range(len(inputs)))
        closest = int(np.argmin(per_input))
        n_min = per_input[closest]
        kept = n_min <= tau
        report.entries.append(FilterEntry(j, closest, n_min, n_total, kept, per_input))
        logger.info(f"生成图像 {j}: 最近输入 {closest}, N_min={n_min}/{n_total}, "
                    f"{'保留' if kept else '丢弃'}")
    if keep_details:
        report.pairs = scores
    kept_indices = report.kept_indices
    logger.info(f"筛选完成: 保留 {len(kept_indices)}/{len(generated)} (τ={tau:.1f})")
    return kept_indices, report


# ==================== 输出 ====================

def dump_pair_details(report: FilterReport, handler: FileHandler):
    """写出逐对匹配文件与置信度灰度图（需要 keep_details=True）"""
    for (j, i), score in sorted(report.pairs.items()):
        stem = f"gen{j:03d}_in{i:03d}"
        geometry = score.geometry
        mask = geometry.inlier_mask
        if mask is None:
            mask = np.zeros(len(geometry.correspondences), dtype=bool)
        write_matches(handler.resolve(f"matches/{stem}.txt"), geometry.correspondences, mask)
        if score.confidence is not None:
            handler.write_png(f"confidence/{stem}.png", score.confidence.as_image())


def read_report_csv(path) -> List[FilterEntry]:
    """读取 filter 命令写出的报告 CSV"""
    path = Path(path)
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != REPORT_HEADER:
            raise ReportFormatError(f"报告表头不符: {header}")
        return [FilterEntry(int(row[0]), int(row[1]), int(row[2]), int(row[3]), row[4] == '1')
                for row in reader if row]
