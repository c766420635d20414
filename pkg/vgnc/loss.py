"""训练损失：(1−λ)·L1 + λ·D-SSIM"""
from typing import Tuple

import numpy as np

from errors import ShapeError
from splat.metrics import ssim_with_grad


def training_loss(rendered: np.ndarray, target: np.ndarray, dssim_weight: float = 0.2,
                  loss_scale: float = 1.0) -> Tuple[float, np.ndarray]:
    """
    Returns:
        (loss, dLoss/dRendered)
    """
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError(f"渲染图 {r.shape} 与目标图 {t.shape} 形状不一致")
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - dssim_weight) * np.sign(diff) / diff.size
    loss = (1.0 - dssim_weight) * l1
    if dssim_weight > 0:
        s, d_ssim = ssim_with_grad(r, t)
        loss += dssim_weight * (1.0 - s) / 2.0
        grad -= 0.5 * dssim_weight * d_ssim
    return loss_scale * loss, loss_scale * grad
