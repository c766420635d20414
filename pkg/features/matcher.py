"""描述子匹配模块"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from config import MatchConfig
from features.detector import Feature, descriptor_matrix
from file_handler import atomic_write_text
from geometry.epipolar import Correspondence

logger = logging.getLogger(__name__)


def match_descriptors(features_a: List[Feature], features_b: List[Feature],
                      config: Optional[MatchConfig] = None) -> List[Correspondence]:
    """
    最近邻匹配 + 比值检验（+ 可选双向检验）

    B 侧只有一个特征时比值检验无定义，改用绝对距离 max_distance。
    结果按描述子距离升序，两侧均为单射。
    """
    config = config or MatchConfig()
    if not features_a or not features_b:
        return []
    desc_a = descriptor_matrix(features_a)
    desc_b = descriptor_matrix(features_b)

    if len(features_b) == 1:
        nearest = np.linalg.norm(desc_a - desc_b[0], axis=1)
        best_b = np.zeros(len(features_a), dtype=np.int64)
        accepted = nearest <= config.max_distance
    else:
        dist, idx = cKDTree(desc_b).query(desc_a, k=2)
        best_b = idx[:, 0]
        nearest = dist[:, 0]
        accepted = nearest < config.ratio * dist[:, 1]

    if config.mutual_check:
        _, back = cKDTree(desc_a).query(desc_b, k=1)
        accepted &= back[best_b] == np.arange(len(features_a))

    candidates = np.flatnonzero(accepted)
    # 每个 B 特征只保留距离最近的 A 特征
    order = candidates[np.lexsort((candidates, nearest[candidates]))]
    taken = set()
    matches = []
    for i in order:
        j = int(best_b[i])
        if j in taken:
            continue
        taken.add(j)
        matches.append(Correspondence(features_a[i].position, features_b[j].position))
        if config.max_matches is not None and len(matches) >= config.max_matches:
            break
    logger.debug(f"匹配: {len(features_a)} x {len(features_b)} -> {len(matches)}")
    return matches


def format_matches(corrs: Sequence[Correspondence], inliers: Optional[np.ndarray] = None) -> str:
    """每行 `ua va ub vb inlier`"""
    if inliers is None:
        inliers = np.ones(len(corrs), dtype=bool)
    lines = [f"{c.pixel_a[0]:.6f} {c.pixel_a[1]:.6f} {c.pixel_b[0]:.6f} {c.pixel_b[1]:.6f} {int(bool(m))}"
             for c, m in zip(corrs, inliers)]
    return '\n'.join(lines) + ('\n' if lines else '')


def write_matches(path, corrs: Sequence[Correspondence], inliers: Optional[np.ndarray] = None) -> Path:
    """写出匹配调试文件"""
    path = Path(path)
    atomic_write_text(path, format_matches(corrs, inliers))
    return path
