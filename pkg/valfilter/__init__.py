"""生成视图筛选模块"""
from .confidence import ConfidenceMap, confidence_map, low_confidence_count
from .reproject import fill_holes, reproject_generated, warp_pixels
from .screening import (FilterEntry, FilterReport, PairGeometry, PairScore, dump_pair_details,
                        estimate_pair_geometry, filter_generated_set, read_report_csv, score_pair)

__all__ = [
    'ConfidenceMap',
    'confidence_map',
    'low_confidence_count',
    'fill_holes',
    'reproject_generated',
    'warp_pixels',
    'FilterEntry',
    'FilterReport',
    'PairGeometry',
    'PairScore',
    'dump_pair_details',
    'estimate_pair_geometry',
    'filter_generated_set',
    'read_report_csv',
    'score_pair',
]
