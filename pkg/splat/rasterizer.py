"""可微高斯光栅化

前向：EWA 投影得到二维高斯，按 (像素, 深度) 全局排序后逐像素前向后 alpha 合成。
反向：对均值、对数尺度、四元数、不透明度 logit、颜色的解析梯度，与前向的跳过 / 截断 /
钳制阈值一致，并给出逐高斯参与合成的像素数。全部计算在 float64 下以数组方式完成，
逐高斯的梯度用 bincount 归约，无共享写冲突。
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from config import (ALPHA_MAX, ALPHA_MIN, COV2D_DILATION, COV2D_EIGEN_FLOOR, EXTENT_SIGMAS,
                    NEAR_PLANE, TRANSMITTANCE_MIN)
from errors import ShapeError
from geometry.camera import CameraView
from splat.gaussians import Gaussian3D, GaussianCloud, quaternion_matrices, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Splat2D:
    """投影后的二维高斯"""
    mean2d: Tuple[float, float]
    cov2d: np.ndarray
    depth: float
    index: int


@dataclass
class ProjectedCloud:
    """整片点云在一个视角下的投影缓存"""
    visible: np.ndarray       # (N,) bool
    means2d: np.ndarray       # (N,2)
    cov2d: np.ndarray         # (N,2,2)，含膨胀
    conics: np.ndarray        # (N,3) = (A,B,C)，cov2d 的逆
    depths: np.ndarray        # (N,)
    p_cam: np.ndarray         # (N,3)
    scales: np.ndarray        # (N,3)
    rot: np.ndarray           # (N,3,3) 由归一化四元数得到
    cov3d: np.ndarray         # (N,3,3)
    jacobian: np.ndarray      # (N,2,3)
    alphas: np.ndarray        # (N,)
    bbox: np.ndarray          # (N,4) x0,x1,y0,y1（闭区间像素）


@dataclass
class RenderResult:
    """前向结果及反向所需缓存"""
    image: np.ndarray
    view: CameraView
    cloud: GaussianCloud
    background: np.ndarray
    proj: ProjectedCloud
    # 有效 (高斯, 像素) 对，按像素、深度排序
    pair_gauss: np.ndarray
    pair_row: np.ndarray
    pair_rank: np.ndarray
    pair_dx: np.ndarray
    pair_dy: np.ndarray
    pair_gval: np.ndarray
    pair_clamped: np.ndarray
    pixels: np.ndarray        # 每行对应的平铺像素下标
    alpha_hat: np.ndarray     # (rows, K)
    t_before: np.ndarray      # (rows, K)
    included: np.ndarray      # (rows, K)
    t_final: np.ndarray       # (rows,)

    @property
    def transmittance(self) -> np.ndarray:
        """逐像素最终透射率 H×W"""
        h, w = self.image.shape[:2]
        t = np.ones(h * w)
        t[self.pixels] = self.t_final
        return t.reshape(h, w)


@dataclass
class CloudGradients:
    """逐参数梯度与致密化统计"""
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d_grad_norm: np.ndarray   # NDC 单位
    visible: np.ndarray
    touch_count: np.ndarray        # 参与合成（未被跳过或终止）的像素数

    def parameters(self):
        return {'means': self.means, 'log_scales': self.log_scales, 'rotations': self.rotations,
                'opacity_logits': self.opacity_logits, 'colors': self.colors}

    @classmethod
    def zeros(cls, count: int) -> 'CloudGradients':
        return cls(np.zeros((count, 3)), np.zeros((count, 3)), np.zeros((count, 4)),
                   np.zeros(count), np.zeros((count, 3)), np.zeros(count), np.zeros(count, dtype=bool),
                   np.zeros(count, dtype=np.int64))


# ==================== 投影 ====================

def project_cloud(cloud: GaussianCloud, view: CameraView) -> ProjectedCloud:
    """向量化 EWA 投影与裁剪"""
    k = view.intrinsics
    world_rot = view.pose.rotation
    n = cloud.count
    p = cloud.means @ world_rot.T + view.pose.translation
    z = p[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    x, y = p[:, 0], p[:, 1]

    means2d = np.column_stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy])
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = k.fx / zs
    jac[:, 0, 2] = -k.fx * x / zs ** 2
    jac[:, 1, 1] = k.fy / zs
    jac[:, 1, 2] = -k.fy * y / zs ** 2

    scales = cloud.scales
    rot = quaternion_matrices(cloud.normalized_rotations) if n else np.zeros((0, 3, 3))
    m = rot * scales[:, None, :]
    cov3d = m @ np.transpose(m, (0, 2, 1))
    t = jac @ world_rot
    cov2d = t @ cov3d @ np.transpose(t, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0].copy(), cov2d[:, 0, 1].copy(), cov2d[:, 1, 1].copy()
    half_gap = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    lam_min = 0.5 * (a + c) - half_gap
    # 特征值下限
    shift = np.maximum(COV2D_EIGEN_FLOOR - lam_min, 0.0)
    cov2d[:, 0, 0] += shift
    cov2d[:, 1, 1] += shift
    a, c = a + shift, c + shift
    det = a * c - b * b
    conics = np.column_stack([c / det, -b / det, a / det])
    lam_max = 0.5 * (a + c) + half_gap

    alphas = sigmoid(cloud.opacity_logits)
    # 超出该半径后 α̂ 必然低于跳过阈值
    sigmas = np.minimum(EXTENT_SIGMAS, np.sqrt(2.0 * np.log(np.maximum(alphas / ALPHA_MIN, 1.0))))
    radius = sigmas * np.sqrt(lam_max)
    u, v = means2d[:, 0], means2d[:, 1]
    with np.errstate(invalid='ignore'):
        x0 = np.maximum(np.ceil(u - radius), 0)
        x1 = np.minimum(np.floor(u + radius), k.width - 1)
        y0 = np.maximum(np.ceil(v - radius), 0)
        y1 = np.minimum(np.floor(v + radius), k.height - 1)
    visible = in_front & (alphas >= ALPHA_MIN) & (x0 <= x1) & (y0 <= y1)
    bbox = np.column_stack([x0, x1, y0, y1])
    bbox[~visible] = 0
    return ProjectedCloud(visible, means2d, cov2d, conics, z, p, scales, rot, cov3d, jac,
                          alphas, bbox.astype(np.int64))


def project_gaussian(g: Gaussian3D, view: CameraView, index: int = 0) -> Optional[Splat2D]:
    """单个高斯的投影；被裁剪时返回 None"""
    proj = project_cloud(GaussianCloud.from_gaussians([g]), view)
    if not proj.visible[0]:
        return None
    return Splat2D(mean2d=(float(proj.means2d[0, 0]), float(proj.means2d[0, 1])),
                   cov2d=proj.cov2d[0].copy(), depth=float(proj.depths[0]), index=index)


# ==================== 前向 ====================

def _pairs(proj: ProjectedCloud, width: int):
    """枚举包围盒内的 (高斯, 像素) 对"""
    idx = np.flatnonzero(proj.visible)
    x0, x1, y0, y1 = proj.bbox[idx].T
    widths = x1 - x0 + 1
    counts = widths * (y1 - y0 + 1)
    total = int(counts.sum())
    gauss = np.repeat(idx, counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    w_rep = np.repeat(widths, counts)
    px = np.repeat(x0, counts) + offsets % w_rep
    py = np.repeat(y0, counts) + offsets // w_rep
    return gauss, px, py, py * width + px


def rasterize(cloud: GaussianCloud, view: CameraView,
              background: Sequence[float] = (0.0, 0.0, 0.0)) -> RenderResult:
    """
    前向渲染

    Args:
        cloud: 高斯点云
        view: 相机
        background: RGB 背景色

    Returns:
        RenderResult（image 为 H×W×3）
    """
    k = view.intrinsics
    h, w = k.height, k.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project_cloud(cloud, view)

    gauss, px, py, pix = _pairs(proj, w)
    dx = px - proj.means2d[gauss, 0]
    dy = py - proj.means2d[gauss, 1]
    ca, cb, cc = proj.conics[gauss].T
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    gval = np.exp(np.minimum(power, 0.0))
    ahat = proj.alphas[gauss] * gval
    clamped = ahat > ALPHA_MAX
    ahat = np.minimum(ahat, ALPHA_MAX)

    keep = ahat >= ALPHA_MIN
    gauss, pix, dx, dy, gval, ahat, clamped = (arr[keep] for arr in (gauss, pix, dx, dy, gval, ahat, clamped))

    order = np.lexsort((gauss, proj.depths[gauss], pix))
    gauss, pix, dx, dy, gval, ahat, clamped = (arr[order] for arr in (gauss, pix, dx, dy, gval, ahat, clamped))

    pixels, row = np.unique(pix, return_inverse=True)
    n_pairs = len(pix)
    if n_pairs:
        starts = np.r_[True, pix[1:] != pix[:-1]]
        group_start = np.maximum.accumulate(np.where(starts, np.arange(n_pairs), 0))
        rank = np.arange(n_pairs) - group_start
        depth_k = int(rank.max()) + 1
    else:
        rank = np.zeros(0, dtype=np.int64)
        depth_k = 1

    alpha_hat = np.zeros((len(pixels), depth_k))
    alpha_hat[row, rank] = ahat
    after = np.cumprod(1.0 - alpha_hat, axis=1)
    t_before = np.concatenate([np.ones((len(pixels), 1)), after[:, :-1]], axis=1)
    included = after >= TRANSMITTANCE_MIN
    t_final = np.prod(np.where(included, 1.0 - alpha_hat, 1.0), axis=1)

    weight = (alpha_hat * t_before * included)[row, rank]
    flat = np.tile(bg, (h * w, 1))
    flat[pixels] *= t_final[:, None]
    colors = cloud.colors[gauss]
    for ch in range(3):
        flat[:, ch] += np.bincount(pix, weights=weight * colors[:, ch], minlength=h * w)

    return RenderResult(image=flat.reshape(h, w, 3), view=view, cloud=cloud, background=bg, proj=proj,
                        pair_gauss=gauss, pair_row=row, pair_rank=rank, pair_dx=dx, pair_dy=dy,
                        pair_gval=gval, pair_clamped=clamped, pixels=pixels, alpha_hat=alpha_hat,
                        t_before=t_before, included=included, t_final=t_final)


def render(cloud: GaussianCloud, view: CameraView,
           background: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """渲染 H×W×3 图像"""
    return rasterize(cloud, view, background).image


# ==================== 反向 ====================

# 旋转矩阵对四元数 (w,x,y,z) 各分量的导数
def _rotation_derivatives(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((len(q), 4, 3, 3))
    d[:, 0] = 2 * np.stack([np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1),
                            np.stack([-y, x, zero], -1)], 1)
    d[:, 1] = 2 * np.stack([np.stack([zero, y, z], -1), np.stack([y, -2 * x, -w], -1),
                            np.stack([z, w, -2 * x], -1)], 1)
    d[:, 2] = 2 * np.stack([np.stack([-2 * y, x, w], -1), np.stack([x, zero, z], -1),
                            np.stack([-w, z, -2 * y], -1)], 1)
    d[:, 3] = 2 * np.stack([np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1),
                            np.stack([x, y, zero], -1)], 1)
    return d


def backward(result: RenderResult, loss_grad: np.ndarray) -> CloudGradients:
    """
    由 dL/dImage 计算逐高斯参数梯度

    Args:
        result: rasterize 的返回值
        loss_grad: 与渲染图同形状的 dL/dImage

    Returns:
        CloudGradients
    """
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != result.image.shape:
        raise ShapeError(f"loss_grad 形状 {loss_grad.shape} 与渲染图 {result.image.shape} 不一致")
    cloud, proj, view = result.cloud, result.proj, result.view
    k = view.intrinsics
    n = cloud.count
    grads = CloudGradients.zeros(n)
    grads.visible = proj.visible.copy()
    if n == 0 or len(result.pair_gauss) == 0:
        return grads

    gauss, row, rank = result.pair_gauss, result.pair_row, result.pair_rank
    flat_grad = loss_grad.reshape(-1, 3)
    pixel_grad = flat_grad[result.pixels]                         # (rows,3)
    pair_grad = pixel_grad[row]                                   # (P,3)

    alpha_hat, t_before, included = result.alpha_hat, result.t_before, result.included
    weight = alpha_hat * t_before * included
    pair_weight = weight[row, rank]
    grads.touch_count = np.bincount(gauss, weights=included[row, rank], minlength=n).astype(np.int64)

    # 颜色
    for ch in range(3):
        grads.colors[:, ch] = np.bincount(gauss, weights=pair_weight * pair_grad[:, ch], minlength=n)

    # dL/dα̂
    c_dot = np.zeros_like(alpha_hat)
    c_dot[row, rank] = np.einsum('pc,pc->p', cloud.colors[gauss], pair_grad)
    contrib = weight * c_dot
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    suffix += (pixel_grad @ result.background)[:, None] * result.t_final[:, None]
    d_ahat = (t_before * c_dot - suffix / (1.0 - alpha_hat)) * included
    d_pair = d_ahat[row, rank] * ~result.pair_clamped

    gval = result.pair_gval
    d_alpha = np.bincount(gauss, weights=d_pair * gval, minlength=n)
    alphas = proj.alphas
    grads.opacity_logits = d_alpha * alphas * (1.0 - alphas)

    # α̂ = α·exp(power)
    d_power = d_pair * alphas[gauss] * gval
    dx, dy = result.pair_dx, result.pair_dy
    ca, cb, cc = proj.conics[gauss].T
    d_u = np.bincount(gauss, weights=d_power * (ca * dx + cb * dy), minlength=n)
    d_v = np.bincount(gauss, weights=d_power * (cb * dx + cc * dy), minlength=n)
    g_conic = np.zeros((n, 2, 2))
    g_conic[:, 0, 0] = np.bincount(gauss, weights=-0.5 * d_power * dx * dx, minlength=n)
    g_conic[:, 0, 1] = np.bincount(gauss, weights=-0.5 * d_power * dx * dy, minlength=n)
    g_conic[:, 1, 0] = g_conic[:, 0, 1]
    g_conic[:, 1, 1] = np.bincount(gauss, weights=-0.5 * d_power * dy * dy, minlength=n)

    grads.mean2d_grad_norm = np.hypot(d_u * 0.5 * k.width, d_v * 0.5 * k.height)

    # 二维协方差 → 三维协方差与雅可比
    conic = np.stack([np.stack([proj.conics[:, 0], proj.conics[:, 1]], -1),
                      np.stack([proj.conics[:, 1], proj.conics[:, 2]], -1)], 1)
    d_cov2d = -conic @ g_conic @ conic
    world_rot = view.pose.rotation
    t = proj.jacobian @ world_rot
    d_cov3d = np.transpose(t, (0, 2, 1)) @ d_cov2d @ t
    d_t = 2.0 * d_cov2d @ t @ proj.cov3d
    d_jac = d_t @ world_rot.T

    z = np.where(proj.visible, proj.p_cam[:, 2], 1.0)
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    d_p = np.zeros((n, 3))
    d_p[:, 0] = d_u * k.fx / z - d_jac[:, 0, 2] * k.fx / z ** 2
    d_p[:, 1] = d_v * k.fy / z - d_jac[:, 1, 2] * k.fy / z ** 2
    d_p[:, 2] = (-d_u * k.fx * x / z ** 2 - d_v * k.fy * y / z ** 2
                 - d_jac[:, 0, 0] * k.fx / z ** 2 + d_jac[:, 0, 2] * 2.0 * k.fx * x / z ** 3
                 - d_jac[:, 1, 1] * k.fy / z ** 2 + d_jac[:, 1, 2] * 2.0 * k.fy * y / z ** 3)
    grads.means = d_p @ world_rot

    # Σ = M·Mᵀ，M = R·diag(s)
    m = proj.rot * proj.scales[:, None, :]
    d_m = 2.0 * d_cov3d @ m
    grads.log_scales = np.einsum('nij,nij->nj', d_m, proj.rot) * proj.scales
    d_rot = d_m * proj.scales[:, None, :]
    qn = cloud.normalized_rotations
    d_qn = np.einsum('nkij,nij->nk', _rotation_derivatives(qn), d_rot)
    q_norm = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    grads.rotations = (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / q_norm

    hidden = ~proj.visible
    for arr in (grads.means, grads.log_scales, grads.rotations, grads.opacity_logits,
                grads.colors, grads.mean2d_grad_norm):
        arr[hidden] = 0.0
    return grads


def render_with_gradients(cloud: GaussianCloud, view: CameraView, loss_grad: np.ndarray,
                          background: Sequence[float] = (0.0, 0.0, 0.0)) -> Tuple[np.ndarray, CloudGradients]:
    """前向 + 反向；返回 (图像, 梯度)"""
    result = rasterize(cloud, view, background)
    return result.image, backward(result, loss_grad)
