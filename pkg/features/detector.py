"""DoG 特征检测与描述子

高斯金字塔 + 高斯差分极值，一步二次插值定位，Hessian 比值去边缘，
36 柱方向直方图，4×4×8 梯度直方图描述子。默认先把输入图像线性插值放大一倍，
特征坐标与尺度仍以原图像素为单位。
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, maximum_filter, minimum_filter

from config import (DESCR_MAG_CLIP, DESCR_SCALE_FACTOR, INPUT_BLUR, LUMA_WEIGHTS,
                    MAX_SUBPIXEL_OFFSET, MIN_DETECT_SIZE, MIN_OCTAVE_SIZE, ORI_HIST_BINS,
                    ORI_PEAK_RATIO, ORI_RADIUS_FACTOR, ORI_SIGMA_FACTOR, DetectorConfig)
from errors import PreconditionError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Feature:
    """特征点"""
    position: Tuple[float, float]
    scale: float
    orientation: float
    descriptor: np.ndarray = field(compare=False, repr=False)
    response: float = 0.0


def to_gray(image: np.ndarray) -> np.ndarray:
    """转灰度 H×W"""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            return arr[:, :, 0]
        return arr[:, :, :3] @ np.asarray(LUMA_WEIGHTS)
    return arr


def descriptor_matrix(features: List[Feature]) -> np.ndarray:
    if not features:
        return np.zeros((0, 0))
    return np.stack([f.descriptor for f in features])


def feature_positions(features: List[Feature]) -> np.ndarray:
    return np.array([f.position for f in features], dtype=np.float64).reshape(-1, 2)


# ==================== 金字塔 ====================

def _octave_count(shape: Tuple[int, int], requested: int) -> int:
    smallest = min(shape)
    n = 1
    while n < requested and smallest // (2 ** n) >= MIN_OCTAVE_SIZE:
        n += 1
    return n


def _upsample(gray: np.ndarray) -> np.ndarray:
    """线性插值放大一倍：输出像素 j 对应输入坐标 j/2"""
    h, w = gray.shape
    yy, xx = np.mgrid[0:2 * h - 1, 0:2 * w - 1] * 0.5
    return map_coordinates(gray, [yy, xx], order=1)


def _build_pyramid(gray: np.ndarray, config: DetectorConfig, n_octaves: int,
                   input_blur: float = INPUT_BLUR) -> List[np.ndarray]:
    """每个八度返回 (n_scales+3, h, w) 的高斯图像栈"""
    s = config.n_scales
    k = 2.0 ** (1.0 / s)
    increments = [config.sigma * k ** (i - 1) * np.sqrt(k * k - 1.0) for i in range(1, s + 3)]
    base = gaussian_filter(gray, np.sqrt(max(config.sigma ** 2 - input_blur ** 2, 0.01)))
    octaves = []
    for _ in range(n_octaves):
        layers = [base]
        for inc in increments:
            layers.append(gaussian_filter(layers[-1], inc))
        octaves.append(np.stack(layers))
        base = layers[s][::2, ::2]
    return octaves


def _gradients(layer: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dx = np.zeros_like(layer)
    dy = np.zeros_like(layer)
    dx[:, 1:-1] = layer[:, 2:] - layer[:, :-2]
    dy[1:-1, :] = layer[2:, :] - layer[:-2, :]
    return np.hypot(dx, dy), np.mod(np.arctan2(dy, dx), TWO_PI)


# ==================== 关键点 ====================

def _refine(dog: np.ndarray, si: int, y: int, x: int,
            contrast: float, edge_ratio: float) -> Optional[Tuple[np.ndarray, float]]:
    """一步二次插值；返回 (偏移 [dx,dy,ds], 插值响应) 或 None"""
    c = dog
    v = c[si, y, x]
    g = 0.5 * np.array([c[si, y, x + 1] - c[si, y, x - 1],
                        c[si, y + 1, x] - c[si, y - 1, x],
                        c[si + 1, y, x] - c[si - 1, y, x]])
    dxx = c[si, y, x + 1] + c[si, y, x - 1] - 2.0 * v
    dyy = c[si, y + 1, x] + c[si, y - 1, x] - 2.0 * v
    dss = c[si + 1, y, x] + c[si - 1, y, x] - 2.0 * v
    dxy = 0.25 * (c[si, y + 1, x + 1] - c[si, y + 1, x - 1] - c[si, y - 1, x + 1] + c[si, y - 1, x - 1])
    dxs = 0.25 * (c[si + 1, y, x + 1] - c[si + 1, y, x - 1] - c[si - 1, y, x + 1] + c[si - 1, y, x - 1])
    dys = 0.25 * (c[si + 1, y + 1, x] - c[si + 1, y - 1, x] - c[si - 1, y + 1, x] + c[si - 1, y - 1, x])
    hessian = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    try:
        offset = -np.linalg.solve(hessian, g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(offset)) or np.abs(offset).max() > MAX_SUBPIXEL_OFFSET:
        return None
    response = v + 0.5 * float(g @ offset)
    if abs(response) < contrast:
        return None
    trace = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0 or trace * trace * edge_ratio >= (edge_ratio + 1.0) ** 2 * det:
        return None
    return offset, response


def _orientations(mag: np.ndarray, ang: np.ndarray, y: int, x: int, sigma: float) -> List[float]:
    """方向直方图主峰（及 ≥0.8 倍的次峰）"""
    h, w = mag.shape
    weight_sigma = ORI_SIGMA_FACTOR * sigma
    radius = max(int(round(ORI_RADIUS_FACTOR * weight_sigma)), 1)
    y0, y1 = max(y - radius, 1), min(y + radius + 1, h - 1)
    x0, x1 = max(x - radius, 1), min(x + radius + 1, w - 1)
    if y0 >= y1 or x0 >= x1:
        return []
    yy, xx = np.mgrid[y0:y1, x0:x1]
    weight = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * weight_sigma ** 2))
    bins = np.floor(ang[y0:y1, x0:x1] * ORI_HIST_BINS / TWO_PI).astype(int) % ORI_HIST_BINS
    hist = np.bincount(bins.ravel(), weights=(weight * mag[y0:y1, x0:x1]).ravel(),
                       minlength=ORI_HIST_BINS)
    hist = (6.0 * hist + 4.0 * (np.roll(hist, 1) + np.roll(hist, -1))
            + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0
    peak = hist.max()
    if peak <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    angles = []
    for i in np.flatnonzero((hist > left) & (hist > right) & (hist >= ORI_PEAK_RATIO * peak)):
        denom = left[i] - 2.0 * hist[i] + right[i]
        shift = 0.5 * (left[i] - right[i]) / denom if denom != 0 else 0.0
        angles.append(float(((i + shift) * TWO_PI / ORI_HIST_BINS) % TWO_PI))
    return angles


def _describe(mag: np.ndarray, ang: np.ndarray, xf: float, yf: float, sigma: float,
              theta: float, config: DetectorConfig) -> Optional[np.ndarray]:
    """旋转到主方向的三线性插值梯度直方图"""
    d, n = config.descriptor_width, config.descriptor_bins
    h, w = mag.shape
    hist_width = DESCR_SCALE_FACTOR * sigma
    radius = int(round(hist_width * np.sqrt(2.0) * (d + 1) * 0.5))
    radius = min(radius, int(np.hypot(h, w)))
    cx, cy = int(round(xf)), int(round(yf))
    oy, ox = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    px, py = cx + ox, cy + oy
    inside = (px > 0) & (px < w - 1) & (py > 0) & (py < h - 1)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rel_x, rel_y = px - xf, py - yf
    rot_x = (cos_t * rel_x + sin_t * rel_y) / hist_width
    rot_y = (-sin_t * rel_x + cos_t * rel_y) / hist_width
    rbin = rot_y + 0.5 * d - 0.5
    cbin = rot_x + 0.5 * d - 0.5
    inside &= (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    if not inside.any():
        return None

    rbin, cbin = rbin[inside], cbin[inside]
    obin = np.mod(ang[py[inside], px[inside]] - theta, TWO_PI) * n / TWO_PI
    weight = mag[py[inside], px[inside]] * np.exp(
        -(rot_x[inside] ** 2 + rot_y[inside] ** 2) / (2.0 * (0.5 * d) ** 2))

    r0, c0, o0 = np.floor(rbin), np.floor(cbin), np.floor(obin)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    r0, c0, o0 = r0.astype(int), c0.astype(int), o0.astype(int)
    hist = np.zeros((d + 2, d + 2, n))
    for dr in (0, 1):
        wr = weight * (fr if dr else 1.0 - fr)
        for dc in (0, 1):
            wc = wr * (fc if dc else 1.0 - fc)
            for do in (0, 1):
                wo = wc * (fo if do else 1.0 - fo)
                np.add.at(hist, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % n), wo)

    desc = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(desc)
    if norm <= 0:
        return None
    desc = np.minimum(desc / norm, DESCR_MAG_CLIP)
    norm = np.linalg.norm(desc)
    if norm <= 0:
        return None
    return desc / norm


def detect_and_describe(image: np.ndarray, config: Optional[DetectorConfig] = None) -> List[Feature]:
    """
    检测并描述特征点

    Args:
        image: H×W 或 H×W×C 的 [0,1] 图像，彩色图内部转灰度
        config: 检测配置

    Returns:
        按响应强度降序排列的特征列表（空列表合法）
    """
    config = config or DetectorConfig()
    gray = to_gray(image)
    h, w = gray.shape
    if h < MIN_DETECT_SIZE or w < MIN_DETECT_SIZE:
        raise PreconditionError(f"图像至少需要 {MIN_DETECT_SIZE}x{MIN_DETECT_SIZE}: {w}x{h}")

    s = config.n_scales
    contrast = config.contrast_threshold / s
    if config.upsample:
        gray, input_blur, base_factor = _upsample(gray), 2.0 * INPUT_BLUR, 0.5
    else:
        input_blur, base_factor = INPUT_BLUR, 1.0
    n_octaves = _octave_count(gray.shape, config.n_octaves)
    features: List[Feature] = []

    for octave, stack in enumerate(_build_pyramid(gray, config, n_octaves, input_blur)):
        dog = stack[1:] - stack[:-1]
        candidates = ((dog == maximum_filter(dog, size=3, mode='nearest'))
                      | (dog == minimum_filter(dog, size=3, mode='nearest')))
        candidates &= np.abs(dog) > 0.5 * contrast
        candidates[0] = candidates[-1] = False
        candidates[:, :1] = candidates[:, -1:] = False
        candidates[:, :, :1] = candidates[:, :, -1:] = False
        gradients = {}
        factor = base_factor * 2.0 ** octave
        oh, ow = dog.shape[1:]

        for si, y, x in zip(*np.nonzero(candidates)):
            refined = _refine(dog, si, y, x, contrast, config.edge_ratio)
            if refined is None:
                continue
            offset, response = refined
            xf, yf = x + offset[0], y + offset[1]
            if not (0 <= xf <= ow - 1 and 0 <= yf <= oh - 1):
                continue
            sigma = config.sigma * 2.0 ** ((si + offset[2]) / s)
            if si not in gradients:
                gradients[si] = _gradients(stack[si])
            mag, ang = gradients[si]
            for theta in _orientations(mag, ang, y, x, sigma):
                desc = _describe(mag, ang, xf, yf, sigma, theta, config)
                if desc is None:
                    continue
                features.append(Feature(position=(float(xf * factor), float(yf * factor)),
                                        scale=float(sigma * factor), orientation=theta,
                                        descriptor=desc, response=float(response)))

    features = [f for f in features
                if 0 <= f.position[0] <= w - 1 and 0 <= f.position[1] <= h - 1]
    features.sort(key=lambda f: (-abs(f.response), f.position[1], f.position[0], f.orientation))
    if config.max_features is not None:
        features = features[:config.max_features]
    logger.debug(f"检测到 {len(features)} 个特征 ({w}x{h}, {n_octaves} 个八度)")
    return features
