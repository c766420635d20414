"""渲染质量评估与筛选结果打分"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import MILD_NOISE_SIGMA
from errors import PreconditionError
from harness.synth import CorruptionRecord
from splat.gaussians import GaussianCloud
from splat.metrics import psnr, ssim
from splat.rasterizer import render
from vgnc.monitor import ViewSample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewMetrics:
    view: str
    psnr: float
    ssim: float

    def to_row(self) -> Tuple:
        return self.view, repr(self.psnr), repr(self.ssim)


@dataclass
class EvalSummary:
    """测试集评估汇总"""
    mean_psnr: float
    mean_ssim: float
    gaussian_count: int
    fps: float
    storage_mb: Optional[float] = None
    views: List[ViewMetrics] = field(default_factory=list)

    def as_dict(self) -> Dict:
        data = asdict(self)
        data.pop('views')
        return data


def evaluate_views(cloud: GaussianCloud, samples: Sequence[ViewSample],
                   names: Optional[Sequence[str]] = None,
                   background=(0.0, 0.0, 0.0)) -> List[ViewMetrics]:
    names = list(names) if names is not None else [f"view_{i:03d}" for i in range(len(samples))]
    metrics = []
    for name, (image, view) in zip(names, samples):
        rendered = render(cloud, view, background)
        metrics.append(ViewMetrics(name, psnr(rendered, image), ssim(rendered, image)))
    return metrics


def measure_fps(cloud: GaussianCloud, samples: Sequence[ViewSample], background=(0.0, 0.0, 0.0)) -> float:
    """逐视图渲染一遍的平均帧率"""
    if not samples:
        return 0.0
    start = time.perf_counter()
    for _, view in samples:
        render(cloud, view, background)
    elapsed = time.perf_counter() - start
    return len(samples) / elapsed if elapsed > 0 else float('inf')


def evaluate_cloud(cloud: GaussianCloud, samples: Sequence[ViewSample],
                   names: Optional[Sequence[str]] = None, background=(0.0, 0.0, 0.0),
                   storage_mb: Optional[float] = None) -> EvalSummary:
    if not samples:
        raise PreconditionError("评估至少需要一个视图")
    views = evaluate_views(cloud, samples, names, background)
    summary = EvalSummary(mean_psnr=float(np.mean([v.psnr for v in views])),
                          mean_ssim=float(np.mean([v.ssim for v in views])),
                          gaussian_count=cloud.count,
                          fps=measure_fps(cloud, samples, background),
                          storage_mb=storage_mb,
                          views=views)
    logger.info(f"评估 {len(views)} 个视图: PSNR {summary.mean_psnr:.2f}, SSIM {summary.mean_ssim:.4f}, "
                f"{cloud.count} 个高斯")
    return summary


# ==================== 筛选打分 ====================

def is_consistent(record: CorruptionRecord, mild_sigma: float = MILD_NOISE_SIGMA) -> bool:
    """干净视图与轻微噪声视图应当保留"""
    return record.kind == 'clean' or (record.kind == 'noise' and record.noise_sigma <= mild_sigma)


def score_filter(kept: Sequence[int], corruption: Sequence[CorruptionRecord],
                 mild_sigma: float = MILD_NOISE_SIGMA) -> Dict[str, float]:
    """以“应当保留”为正类的精确率 / 召回率，以及被污染视图的剔除率"""
    kept_set = set(int(j) for j in kept)
    positive = {r.gen_index for r in corruption if is_consistent(r, mild_sigma)}
    negative = {r.gen_index for r in corruption} - positive
    hits = len(kept_set & positive)
    return {
        'kept': len(kept_set),
        'precision': hits / len(kept_set) if kept_set else 1.0,
        'recall': hits / len(positive) if positive else 1.0,
        'rejection': len(negative - kept_set) / len(negative) if negative else 1.0,
    }
