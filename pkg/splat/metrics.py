"""图像质量指标：MSE、PSNR、SSIM（含对第一幅图的解析梯度）"""
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.ndimage import correlate1d

from config import PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW
from errors import ShapeError


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"图像形状不一致: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """逐像素逐通道平均平方误差"""
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float) -> float:
    if value < 1e-12:
        return PSNR_CAP
    return float(-10.0 * np.log10(value))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR (dB)，峰值 1.0"""
    return psnr_from_mse(mse(a, b))


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray) -> np.ndarray:
    """可分离高斯窗口（零填充，自伴算子）"""
    kernel = gaussian_window()
    out = correlate1d(img, kernel, axis=0, mode='constant')
    return correlate1d(out, kernel, axis=1, mode='constant')


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    mu_a, mu_b = _filter(a), _filter(b)
    e_aa, e_bb, e_ab = _filter(a * a), _filter(b * b), _filter(a * b)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """11×11 高斯窗口 SSIM，按通道与位置平均"""
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    _, _, n1, n2, d1, d2 = _ssim_terms(a, b)
    return float(np.mean(n1 * n2 / (d1 * d2)))


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    SSIM 及其对 a 的梯度
    Returns:
        (ssim, dSSIM/da，与 a 同形状)
    """
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_hwc(a), _as_hwc(b)
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b)
    denom = d1 * d2
    s = n1 * n2 / denom
    d_mu = 2.0 * mu_b * (n2 - n1) / denom - 2.0 * mu_a * s * (1.0 / d1 - 1.0 / d2)
    d_eaa = -s / d2
    d_eab = 2.0 * n1 / denom
    grad = _filter(d_mu) + 2.0 * a * _filter(d_eaa) + b * _filter(d_eab)
    grad /= s.size
    return float(np.mean(s)), grad.reshape(shape)
