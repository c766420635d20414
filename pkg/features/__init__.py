"""特征模块"""
from .detector import Feature, descriptor_matrix, detect_and_describe, feature_positions, to_gray
from .matcher import format_matches, match_descriptors, write_matches
from .ransac import (eight_point, estimate_essential_ransac, estimate_rotation_ransac, kabsch,
                     rotation_reprojection_error, sampson_distance)

__all__ = [
    'Feature',
    'descriptor_matrix',
    'detect_and_describe',
    'feature_positions',
    'to_gray',
    'format_matches',
    'match_descriptors',
    'write_matches',
    'eight_point',
    'estimate_essential_ransac',
    'estimate_rotation_ransac',
    'kabsch',
    'rotation_reprojection_error',
    'sampson_distance',
]
