"""三维高斯点云

参数以数组形式并行存放：均值、对数尺度、四元数 (w,x,y,z)、不透明度 logit、RGB 颜色（0 阶）。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.special import expit, logit

from errors import ShapeError

logger = logging.getLogger(__name__)

PARAMETER_NAMES = ('means', 'log_scales', 'rotations', 'opacity_logits', 'colors')
PARAMETER_WIDTHS = {'means': 3, 'log_scales': 3, 'rotations': 4, 'opacity_logits': None, 'colors': 3}
PLY_FIELDS = ('x', 'y', 'z', 'sx', 'sy', 'sz', 'qw', 'qx', 'qy', 'qz', 'opacity', 'r', 'g', 'b')

# logit 的安全范围
_OPACITY_EPS = 1e-12


def sigmoid(x):
    return expit(x)


def inverse_sigmoid(x):
    return logit(np.clip(x, _OPACITY_EPS, 1.0 - _OPACITY_EPS))


@dataclass(frozen=True)
class Gaussian3D:
    """单个高斯"""
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def quaternion_matrices(q: np.ndarray) -> np.ndarray:
    """单位四元数 (N,4) 转旋转矩阵 (N,3,3)"""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class GaussianCloud:
    """高斯点云（并行数组）"""
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        count = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        for name in PARAMETER_NAMES[1:]:
            if len(getattr(self, name)) != count:
                raise ShapeError(f"{name} 长度 {len(getattr(self, name))} 与 means 长度 {count} 不一致")

    # ==================== 构造 ====================

    @classmethod
    def empty(cls) -> 'GaussianCloud':
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> 'GaussianCloud':
        items = list(gaussians)
        if not items:
            return cls.empty()
        return cls(means=[g.mean for g in items],
                   log_scales=[g.log_scale for g in items],
                   rotations=[g.rotation for g in items],
                   opacity_logits=[g.opacity_logit for g in items],
                   colors=[g.color for g in items])

    @classmethod
    def from_parameters(cls, params: Dict[str, np.ndarray]) -> 'GaussianCloud':
        return cls(**{name: params[name] for name in PARAMETER_NAMES})

    @classmethod
    def isotropic(cls, means: np.ndarray, scales: np.ndarray, opacities: np.ndarray,
                  colors: np.ndarray) -> 'GaussianCloud':
        """各向同性初始化（单位四元数）"""
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        log_scales = np.repeat(np.log(np.asarray(scales, dtype=np.float64).reshape(-1, 1)), 3, axis=1)
        return cls(means, log_scales, rotations,
                   inverse_sigmoid(np.broadcast_to(opacities, (n,))), colors)

    # ==================== 访问 ====================

    @property
    def count(self) -> int:
        return len(self.means)

    def __len__(self) -> int:
        return self.count

    def gaussian(self, index: int) -> Gaussian3D:
        return Gaussian3D(self.means[index].copy(), self.log_scales[index].copy(),
                          self.rotations[index].copy(), float(self.opacity_logits[index]),
                          self.colors[index].copy())

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def normalized_rotations(self) -> np.ndarray:
        return self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def rotation_matrices(self) -> np.ndarray:
        return quaternion_matrices(self.normalized_rotations)

    def covariances(self) -> np.ndarray:
        """Σ = R·diag(s)²·Rᵀ，(N,3,3)"""
        m = self.rotation_matrices() * self.scales[:, None, :]
        return m @ np.transpose(m, (0, 2, 1))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    # ==================== 变换 ====================

    def copy(self) -> 'GaussianCloud':
        return GaussianCloud(**{name: arr.copy() for name, arr in self.parameters().items()})

    def take(self, indices: np.ndarray) -> 'GaussianCloud':
        """按索引或布尔掩码取子集"""
        return GaussianCloud(**{name: arr[indices] for name, arr in self.parameters().items()})

    def concat(self, other: 'GaussianCloud') -> 'GaussianCloud':
        return GaussianCloud(**{name: np.concatenate([getattr(self, name), getattr(other, name)])
                                for name in PARAMETER_NAMES})

    def normalize_rotations(self):
        """原地归一化四元数"""
        self.rotations = self.normalized_rotations


# ==================== PLY ====================

def save_ply(cloud: GaussianCloud, path) -> Path:
    """
    写出 ASCII PLY（激活后的值）：x y z sx sy sz qw qx qy qz opacity r g b
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if cloud.count:
        columns = np.column_stack([cloud.means, cloud.scales, cloud.normalized_rotations,
                                   cloud.opacities, cloud.colors])
    else:
        columns = np.zeros((0, len(PLY_FIELDS)))
    elements = np.empty(cloud.count, dtype=[(name, 'f8') for name in PLY_FIELDS])
    for i, name in enumerate(PLY_FIELDS):
        elements[name] = columns[:, i]
    element = PlyElement.describe(elements, 'vertex')
    temp_file = path.with_suffix(path.suffix + '.tmp')
    PlyData([element], text=True).write(str(temp_file))
    temp_file.replace(path)
    logger.debug(f"写出点云 {path} ({cloud.count} 个高斯)")
    return path


def load_ply(path) -> GaussianCloud:
    """读取 save_ply 写出的 PLY"""
    vertex = PlyData.read(str(path))['vertex']
    column = {name: np.asarray(vertex[name], dtype=np.float64) for name in PLY_FIELDS}
    means = np.column_stack([column['x'], column['y'], column['z']])
    scales = np.column_stack([column['sx'], column['sy'], column['sz']])
    rotations = np.column_stack([column['qw'], column['qx'], column['qy'], column['qz']])
    colors = np.column_stack([column['r'], column['g'], column['b']])
    return GaussianCloud(means, np.log(scales), rotations, inverse_sigmoid(column['opacity']), colors)


def storage_megabytes(path) -> Optional[float]:
    """文件大小（MB）"""
    path = Path(path)
    return path.stat().st_size / (1024 * 1024) if path.exists() else None
