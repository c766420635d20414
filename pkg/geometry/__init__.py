"""几何模块"""
from .camera import (CameraIntrinsics, CameraView, Pose, look_at, project_point, project_points,
                     quaternion_to_rotation, relative_pose, rotation_to_quaternion)
from .epipolar import (Correspondence, EssentialMatrix, correspondence_arrays, decompose_essential,
                       epipolar_residuals, essential_from_pose, project_to_manifold, skew,
                       triangulate, triangulate_points)

__all__ = [
    'CameraIntrinsics', 'CameraView', 'Pose', 'look_at', 'project_point', 'project_points',
    'quaternion_to_rotation', 'relative_pose', 'rotation_to_quaternion',
    'Correspondence', 'EssentialMatrix', 'correspondence_arrays', 'decompose_essential',
    'epipolar_residuals', 'essential_from_pose', 'project_to_manifold', 'skew',
    'triangulate', 'triangulate_points',
]
