"""数量上限扫描与消融实验"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import product
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import (ABLATION_HEADER, FINAL_CLOUD_NAME, SWEEP_HEADER, TRACE_NAME, DetectorConfig,
                    InitConfig, MatchConfig, TrainConfig)
from errors import PreconditionError
from file_handler import FileHandler
from harness.initializer import joint_initialize
from harness.scene import Scene
from splat.gaussians import GaussianCloud, save_ply
from splat.metrics import ssim
from splat.rasterizer import render
from vgnc.monitor import MonitorTrace, validation_monitor
from vgnc.trainer import TrainingViews, pooled_psnr, vgnc_train

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float]):
    return '' if value is None else repr(float(value))


@dataclass(frozen=True)
class SweepEntry:
    """固定上限训练一次的结果"""
    cap: int
    num_gaussians: int
    train_psnr: float
    test_psnr: Optional[float]
    test_ssim: Optional[float]
    monitor: float

    def to_row(self) -> Tuple:
        return (self.cap, self.num_gaussians, _fmt(self.train_psnr), _fmt(self.test_psnr),
                _fmt(self.test_ssim), _fmt(self.monitor))


@dataclass(frozen=True)
class AblationEntry:
    joint_init: bool
    number_control: bool
    num_gaussians: int
    train_psnr: float
    test_psnr: Optional[float]
    test_ssim: Optional[float]

    def to_row(self) -> Tuple:
        return (int(self.joint_init), int(self.number_control), self.num_gaussians,
                _fmt(self.train_psnr), _fmt(self.test_psnr), _fmt(self.test_ssim))


def _mean_ssim(cloud: GaussianCloud, samples, background) -> Optional[float]:
    if not samples:
        return None
    return float(np.mean([ssim(render(cloud, view, background), image) for image, view in samples]))


def _save_run(out: Optional[FileHandler], name: str, cloud: GaussianCloud, trace: MonitorTrace):
    if out is None:
        return
    run_dir = out.subdir(name)
    save_ply(cloud, run_dir.resolve(FINAL_CLOUD_NAME))
    trace.to_csv(run_dir.resolve(TRACE_NAME))


# ==================== 上限扫描 ====================

def run_sweep(views: TrainingViews, initial_cloud: GaussianCloud, caps: Sequence[int],
              config: Optional[TrainConfig] = None, *, workers: int = 1,
              on_entry_done: Optional[Callable[[SweepEntry], None]] = None,
              out: Optional[FileHandler] = None) -> List[SweepEntry]:
    """
    对每个上限关闭数量控制、固定上限训练

    Args:
        views: 训练 / 验证 / 测试视图
        initial_cloud: 共同的初始点云
        caps: 上限列表（可重复）
        config: 基础训练配置
        workers: 并行训练数；结果按 caps 顺序返回
        on_entry_done: 每个条目完成时回调
        out: 给出时每个条目写出点云与监控记录到独立子目录

    Returns:
        与 caps 一一对应的 SweepEntry
    """
    if len(caps) == 0:
        raise PreconditionError("至少需要一个上限")
    base = config or TrainConfig()
    background = base.background

    def run_one(index: int, cap: int) -> SweepEntry:
        cfg = replace(base, number_control=False, count_cap_initial=int(cap), progress_bar=False)
        cloud, trace = vgnc_train(views, initial_cloud, cfg)
        entry = SweepEntry(cap=int(cap), num_gaussians=cloud.count,
                           train_psnr=pooled_psnr(cloud, views.train, background),
                           test_psnr=pooled_psnr(cloud, views.test, background),
                           test_ssim=_mean_ssim(cloud, views.test, background),
                           monitor=validation_monitor(cloud, views.validation, background))
        _save_run(out, f"entry_{index:02d}_cap_{int(cap)}", cloud, trace)
        logger.info(f"扫描 cap={cap}: {cloud.count} 个高斯, 测试 PSNR {_fmt(entry.test_psnr) or '-'}")
        if on_entry_done:
            on_entry_done(entry)
        return entry

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(run_one, i, cap) for i, cap in enumerate(caps)]
        return [f.result() for f in futures]


def write_sweep_csv(entries: Sequence[SweepEntry], handler: FileHandler, name: str):
    return handler.write_csv(name, SWEEP_HEADER, [e.to_row() for e in entries])


# ==================== 消融 ====================

def run_ablation(scene: Scene, kept_generated: Sequence[int], config: Optional[TrainConfig] = None,
                 init_config: Optional[InitConfig] = None, *,
                 detector_config: Optional[DetectorConfig] = None,
                 match_config: Optional[MatchConfig] = None,
                 workers: int = 1,
                 on_entry_done: Optional[Callable[[AblationEntry], None]] = None,
                 out: Optional[FileHandler] = None) -> List[AblationEntry]:
    """联合初始化 × 数量控制 四种组合；数量控制关闭时不设上限"""
    base = config or TrainConfig()
    views = scene.training_views(kept_generated)
    inits = {joint: joint_initialize(scene, kept_generated if joint else (), init_config,
                                     detector_config=detector_config, match_config=match_config,
                                     workers=workers)
             for joint in (False, True)}

    def run_one(joint: bool, number_control: bool) -> AblationEntry:
        cfg = replace(base, number_control=number_control, progress_bar=False,
                      count_cap_initial=base.count_cap_initial if number_control else None)
        cloud, trace = vgnc_train(views, inits[joint], cfg)
        entry = AblationEntry(joint, number_control, cloud.count,
                              train_psnr=pooled_psnr(cloud, views.train, base.background),
                              test_psnr=pooled_psnr(cloud, views.test, base.background),
                              test_ssim=_mean_ssim(cloud, views.test, base.background))
        _save_run(out, f"joint{int(joint)}_nc{int(number_control)}", cloud, trace)
        if on_entry_done:
            on_entry_done(entry)
        return entry

    combos = list(product((False, True), repeat=2))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(run_one, joint, nc) for joint, nc in combos]
        return [f.result() for f in futures]


def write_ablation_csv(entries: Sequence[AblationEntry], handler: FileHandler, name: str):
    return handler.write_csv(name, ABLATION_HEADER, [e.to_row() for e in entries])
