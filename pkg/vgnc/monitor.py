"""验证集监控与过拟合检测"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import TRACE_HEADER
from errors import PreconditionError, ReportFormatError
from file_handler import atomic_write_text, format_csv
from geometry.camera import CameraView
from splat.gaussians import GaussianCloud
from splat.metrics import mse
from splat.rasterizer import render

logger = logging.getLogger(__name__)

ViewSample = Tuple[np.ndarray, CameraView]


@dataclass(frozen=True)
class MonitorRecord:
    """一次验证检查"""
    iteration: int
    gaussian_count: int
    cap: Optional[int]
    monitor: float
    train_psnr: float
    test_psnr: Optional[float] = None
    phase: str = ''

    def to_row(self) -> Tuple:
        return (self.iteration, self.gaussian_count, '' if self.cap is None else self.cap,
                repr(self.monitor), repr(self.train_psnr),
                '' if self.test_psnr is None else repr(self.test_psnr), self.phase)


@dataclass
class MonitorTrace:
    """监控记录与运行最优 (M_opt, Num_opt)"""
    records: List[MonitorRecord] = field(default_factory=list)
    m_opt: float = math.inf
    num_opt: Optional[int] = None
    opt_iteration: Optional[int] = None

    def record(self, rec: MonitorRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise PreconditionError(
                f"迭代号必须严格递增: {rec.iteration} <= {self.records[-1].iteration}")
        self.records.append(rec)
        if rec.monitor < self.m_opt:
            self.m_opt = rec.monitor
            self.num_opt = rec.gaussian_count
            self.opt_iteration = rec.iteration

    @property
    def monitors(self) -> List[float]:
        return [r.monitor for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    # ==================== CSV ====================

    def to_csv(self, path) -> Path:
        path = Path(path)
        atomic_write_text(path, format_csv(TRACE_HEADER, (r.to_row() for r in self.records)))
        return path

    @classmethod
    def from_csv(cls, path) -> 'MonitorTrace':
        trace = cls()
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if tuple(header or ()) != TRACE_HEADER:
                raise ReportFormatError(f"监控记录表头不符: {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    trace.record(MonitorRecord(
                        iteration=int(row[0]),
                        gaussian_count=int(row[1]),
                        cap=int(row[2]) if row[2] else None,
                        monitor=float(row[3]),
                        train_psnr=float(row[4]),
                        test_psnr=float(row[5]) if row[5] else None,
                        phase=row[6]))
                except (ValueError, IndexError):
                    raise ReportFormatError(f"第 {lineno} 行无法解析: {row}") from None
        return trace


def validation_monitor(cloud: GaussianCloud, validation: Sequence[ViewSample],
                       background=(0.0, 0.0, 0.0)) -> float:
    """M = 各验证视图逐像素逐通道 MSE 的平均"""
    if len(validation) == 0:
        raise PreconditionError("验证集为空")
    errors = [mse(render(cloud, view, background), image) for image, view in validation]
    return float(np.mean(errors))


def detect_overfit(trace: MonitorTrace, window: int) -> bool:
    """最后 window+1 个监控值严格递增"""
    values = trace.monitors
    if window < 1 or len(values) < window + 1:
        return False
    tail = values[-(window + 1):]
    return all(b > a for a, b in zip(tail, tail[1:]))
