"""致密化、剪枝与高斯丢弃

克隆 / 分裂按平均二维位置梯度降序处理，数量达到上限即停止；
优化器状态行随点云同步增删。
"""
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from config import TrainConfig
from errors import PreconditionError
from geometry.camera import CameraView
from splat.gaussians import GaussianCloud
from splat.rasterizer import CloudGradients
from vgnc.optimizer import Adam

logger = logging.getLogger(__name__)

SPLIT_COUNT = 2
SPLIT_SCALE_DIVISOR = 1.6
EXTENT_MARGIN = 1.1


@dataclass
class DensifyStats:
    """自上次致密化以来的梯度累积"""
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> 'DensifyStats':
        return cls(np.zeros(count), np.zeros(count, dtype=np.int64))

    @property
    def count(self) -> int:
        return len(self.grad_accum)

    def add(self, grads: CloudGradients):
        """只统计本视角下实际参与合成的高斯"""
        touched = grads.touch_count > 0
        self.grad_accum[touched] += grads.mean2d_grad_norm[touched]
        self.denom[touched] += 1

    def mean_grad(self) -> np.ndarray:
        out = np.zeros(self.count)
        touched = self.denom > 0
        out[touched] = self.grad_accum[touched] / self.denom[touched]
        return out


def scene_extent(views: Iterable[CameraView]) -> float:
    """相机中心到其均值的最大距离 × 1.1；单相机时为 1"""
    centers = np.array([v.center for v in views])
    if len(centers) == 0:
        return 1.0
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return radius * EXTENT_MARGIN if radius > 1e-9 else 1.0


def _split_children(cloud: GaussianCloud, indices: np.ndarray, rng: np.random.Generator) -> GaussianCloud:
    """每个父高斯按自身协方差采样 2 个子高斯，尺度除以 1.6"""
    parents = cloud.take(np.repeat(indices, SPLIT_COUNT))
    if parents.count == 0:
        return parents
    samples = rng.normal(size=(parents.count, 3)) * parents.scales
    offsets = np.einsum('nij,nj->ni', parents.rotation_matrices(), samples)
    parents.means = parents.means + offsets
    parents.log_scales = parents.log_scales - np.log(SPLIT_SCALE_DIVISOR)
    return parents


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, config: TrainConfig,
                      cap: Optional[int], extent: float, optimizer: Optional[Adam] = None,
                      rng: Optional[np.random.Generator] = None) -> GaussianCloud:
    """
    受数量上限约束的克隆 / 分裂，然后按不透明度剪枝

    Args:
        cloud: 当前点云
        stats: 与点云对齐的梯度统计
        config: 训练配置（grad_threshold、split_scale_threshold、prune_opacity）
        cap: 数量上限，None 表示不限
        extent: 场景尺度
        optimizer: 同步增删行的优化器
        rng: 分裂采样随机源

    Returns:
        新点云
    """
    rng = rng or np.random.default_rng(0)
    count = cloud.count
    grads = stats.mean_grad()
    candidates = np.flatnonzero(grads > config.grad_threshold)
    candidates = candidates[np.lexsort((candidates, -grads[candidates]))]
    room = len(candidates) if cap is None else max(0, cap - count)
    chosen = candidates[:room]

    max_scale = cloud.scales[chosen].max(axis=1) if len(chosen) else np.zeros(0)
    small = max_scale < config.split_scale_threshold * extent
    clone_idx = np.sort(chosen[small])
    split_idx = np.sort(chosen[~small])

    grown = cloud.concat(cloud.take(clone_idx)).concat(_split_children(cloud, split_idx, rng))
    if optimizer is not None:
        optimizer.extend(grown.count - count)

    keep = np.ones(grown.count, dtype=bool)
    keep[split_idx] = False
    keep &= grown.opacities >= config.prune_opacity
    result = grown.take(keep)
    if optimizer is not None:
        optimizer.take(keep)
    logger.debug(f"致密化: 克隆 {len(clone_idx)}, 分裂 {len(split_idx)}, "
                 f"剪枝 {int((~keep).sum()) - len(split_idx)}, {count} -> {result.count} (上限 {cap})")
    return result


def gaussian_dropout(cloud: GaussianCloud, target_count: int, seed: int,
                     optimizer: Optional[Adam] = None) -> GaussianCloud:
    """随机保留恰好 target_count 个高斯（数量不超过目标时原样返回）"""
    if target_count < 0:
        raise PreconditionError(f"target_count 不能为负: {target_count}")
    if cloud.count <= target_count:
        return cloud
    survivors = np.sort(np.random.default_rng(seed).choice(cloud.count, target_count, replace=False))
    if optimizer is not None:
        optimizer.take(survivors)
    logger.info(f"高斯丢弃: {cloud.count} -> {target_count}")
    return cloud.take(survivors)
