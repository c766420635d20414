"""置信度图与低置信度像素计数"""
from dataclasses import dataclass

import numpy as np

from errors import PreconditionError, ShapeError


@dataclass
class ConfidenceMap:
    """逐像素置信度；无效像素取 NaN"""
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    @property
    def pixel_count(self) -> int:
        return int(self.valid.size)

    def as_image(self) -> np.ndarray:
        """灰度可视化，无效像素为 0"""
        return np.where(self.valid, self.values, 0.0)


def confidence_map(i_img: np.ndarray, reproj: np.ndarray, mask: np.ndarray, sigma: float) -> ConfidenceMap:
    """M = exp(−‖I − Ĩ‖² / σ²)，‖·‖ 为通道上的欧氏距离"""
    a = np.asarray(i_img, dtype=np.float64)
    b = np.asarray(reproj, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"图像形状不一致: {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"掩码形状 {mask.shape} 与图像 {a.shape[:2]} 不一致")
    if sigma <= 0:
        raise PreconditionError(f"sigma 必须 > 0: {sigma}")
    diff = a - b
    dist2 = diff ** 2 if diff.ndim == 2 else np.sum(diff ** 2, axis=2)
    values = np.where(mask, np.exp(-dist2 / sigma ** 2), np.nan)
    return ConfidenceMap(values=values, valid=mask.copy())


def low_confidence_count(m: ConfidenceMap, theta: float) -> int:
    """有效像素中 M ≤ θ 的个数，加上全部无效像素"""
    low = np.count_nonzero(m.values[m.valid] <= theta)
    return int(low + np.count_nonzero(~m.valid))
