"""针孔相机与位姿模块

约定：位姿为世界到相机（x_cam = R·x_world + t），+z 朝前，
像素原点在左上角，(0,0) 为左上像素中心。
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import BEHIND_CAMERA_EPS, ROTATION_TOLERANCE
from errors import PointBehindCameraError, PreconditionError


@dataclass(frozen=True)
class CameraIntrinsics:
    """相机内参"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise PreconditionError(f"焦距必须为正: fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PreconditionError(
                f"主点越界: ({self.cx}, {self.cy}) 不在 {self.width}x{self.height} 内")

    @property
    def matrix(self) -> np.ndarray:
        """内参矩阵 K"""
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        """K⁻¹"""
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """像素坐标 (N,2) 转归一化齐次坐标 (N,3)"""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        x = (pixels[:, 0] - self.cx) / self.fx
        y = (pixels[:, 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=1)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """像素是否在图像范围内"""
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= 0) & (pixels[:, 0] <= self.width - 1)
                & (pixels[:, 1] >= 0) & (pixels[:, 1] <= self.height - 1))


@dataclass(frozen=True)
class Pose:
    """世界到相机位姿"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ROTATION_TOLERANCE:
            raise PreconditionError("旋转矩阵不正交")
        if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE:
            raise PreconditionError("旋转矩阵行列式不为 1")
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, qvec, tvec) -> 'Pose':
        return cls(quaternion_to_rotation(qvec), np.asarray(tvec, dtype=np.float64))

    @property
    def quaternion(self) -> np.ndarray:
        return rotation_to_quaternion(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """相机中心（世界坐标）"""
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """世界点 (N,3) 变换到相机坐标"""
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def compose(self, other: 'Pose') -> 'Pose':
        """先 other 后 self"""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> 'Pose':
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraView:
    """内参 + 位姿"""
    intrinsics: CameraIntrinsics
    pose: Pose

    @property
    def center(self) -> np.ndarray:
        return self.pose.center


def quaternion_to_rotation(qvec) -> np.ndarray:
    """Hamilton 四元数 (w,x,y,z) 转旋转矩阵"""
    w, x, y, z = np.asarray(qvec, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def rotation_to_quaternion(rotation: np.ndarray) -> np.ndarray:
    """旋转矩阵转 Hamilton 四元数 (w,x,y,z)，w ≥ 0"""
    x, y, z, w = Rotation.from_matrix(rotation).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def project_point(point_world, view: CameraView) -> Tuple[Tuple[float, float], float]:
    """
    针孔投影
    Returns:
        ((u, v), 深度)
    """
    p = view.pose.transform(np.asarray(point_world, dtype=np.float64))[0]
    depth = float(p[2])
    if depth <= BEHIND_CAMERA_EPS:
        raise PointBehindCameraError(f"点位于相机后方: 深度 {depth}")
    k = view.intrinsics
    u = k.fx * p[0] / depth + k.cx
    v = k.fy * p[1] / depth + k.cy
    return (float(u), float(v)), depth


def project_points(points_world: np.ndarray, view: CameraView) -> Tuple[np.ndarray, np.ndarray]:
    """批量投影，不检查深度；返回 (像素 (N,2), 深度 (N,))"""
    p = view.pose.transform(points_world)
    k = view.intrinsics
    z = p[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = k.fx * p[:, 0] / z + k.cx
        v = k.fy * p[:, 1] / z + k.cy
    return np.stack([u, v], axis=1), z


def relative_pose(view_a: CameraView, view_b: CameraView) -> Pose:
    """A 相机坐标到 B 相机坐标：x_b = R·x_a + t"""
    return view_b.pose.compose(view_a.pose.inverse())


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """构造朝向 target 的相机位姿（+z 前，+y 下）"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(np.asarray(up, dtype=np.float64), forward)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise PreconditionError("视线方向与 up 向量平行")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=0)
    return Pose(rotation, -rotation @ eye)
