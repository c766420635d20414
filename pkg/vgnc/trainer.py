"""验证引导的高斯数量控制训练循环

阶段 GROW：逐步放宽数量上限并致密化，每 validation_interval 次迭代计算监控值 M，
记录最优 (M_opt, Num_opt)；到 densify_until 或 M 连续上升 W 次时结束。
阶段 DROPPED：随机丢弃到 Num_opt，允许在上限 Num_opt 内重新致密化。
阶段 REFINE：上限固定为 Num_opt，继续优化到 total_iterations。
"""
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import TrainConfig
from errors import PreconditionError
from splat.gaussians import GaussianCloud
from splat.metrics import mse, psnr_from_mse
from splat.rasterizer import backward, rasterize, render
from vgnc.checkpoint import CheckpointManager, CheckpointState
from vgnc.density import DensifyStats, densify_and_prune, gaussian_dropout, scene_extent
from vgnc.loss import training_loss
from vgnc.monitor import MonitorRecord, MonitorTrace, ViewSample, detect_overfit, validation_monitor
from vgnc.optimizer import create_optimizer, optimizer_step

logger = logging.getLogger(__name__)

# 随机源标签：(seed, iteration, 用途)
_SPLIT_STREAM = 1
_DROPOUT_STREAM = 2


class Phase(Enum):
    GROW = 'grow'
    DROPPED = 'dropped'
    REFINE = 'refine'


_PHASE_ORDER = {Phase.GROW: 0, Phase.DROPPED: 1, Phase.REFINE: 2}


@dataclass
class ControllerState:
    """控制器状态"""
    phase: Phase = Phase.GROW
    cap: Optional[int] = None
    rises: int = 0
    num_opt: Optional[int] = None
    grow_end: Optional[int] = None
    dropped_until: Optional[int] = None
    stale_checks: int = 0

    def advance(self, phase: Phase):
        """阶段只能前进"""
        if _PHASE_ORDER[phase] <= _PHASE_ORDER[self.phase]:
            raise PreconditionError(f"非法阶段切换: {self.phase.value} -> {phase.value}")
        logger.info(f"阶段切换: {self.phase.value} -> {phase.value} (上限 {self.cap})")
        self.phase = phase


@dataclass
class TrainingViews:
    """训练 / 验证 / 测试视图"""
    train: List[ViewSample]
    validation: List[ViewSample]
    test: List[ViewSample] = field(default_factory=list)


def _config_hash(config: TrainConfig) -> str:
    return hashlib.md5(repr(sorted(asdict(config).items())).encode('utf-8')).hexdigest()


def pooled_psnr(cloud: GaussianCloud, views: List[ViewSample], background) -> Optional[float]:
    """多视图合并 MSE 的 PSNR"""
    if not views:
        return None
    return psnr_from_mse(float(np.mean([mse(render(cloud, view, background), image)
                                        for image, view in views])))


class VgncTrainer:
    """训练器"""

    def __init__(self, views: TrainingViews, cloud: GaussianCloud, config: Optional[TrainConfig] = None,
                 checkpoints: Optional[CheckpointManager] = None,
                 on_record: Optional[Callable[[MonitorRecord], None]] = None,
                 on_progress: Optional[Callable[[int, int], None]] = None):
        if not views.train:
            raise PreconditionError("至少需要一个训练视图")
        if not views.validation:
            raise PreconditionError("至少需要一个验证视图")
        self.views = views
        self.config = config or TrainConfig()
        self.checkpoints = checkpoints
        self.on_record = on_record
        self.on_progress = on_progress

        self.cloud = cloud.copy()
        self.cloud.normalize_rotations()
        self.extent = scene_extent(view for _, view in views.train)
        self.optimizer = create_optimizer(self.cloud, self.config, self.extent)
        self.stats = DensifyStats.zeros(self.cloud.count)
        self.trace = MonitorTrace()
        self.state = ControllerState()
        self.stopped_early = False
        self.last_loss = math.nan
        self._epoch_cache: Tuple[int, Optional[np.ndarray]] = (-1, None)
        self._init_cap()

    def _init_cap(self):
        config = self.config
        cap = config.count_cap_initial
        if cap is None and config.number_control:
            cap = max(self.cloud.count, 1)
        self.state.cap = cap
        if cap is not None and self.cloud.count > cap:
            self._replace_cloud(gaussian_dropout(self.cloud, cap, [config.seed, 0, _DROPOUT_STREAM],
                                                 self.optimizer))

    def _replace_cloud(self, cloud: GaussianCloud):
        self.cloud = cloud
        self.stats = DensifyStats.zeros(cloud.count)

    # ==================== 单步 ====================

    def _next_view(self, iteration: int) -> ViewSample:
        """每个 epoch 一个由 (seed, epoch) 决定的排列"""
        n = len(self.views.train)
        epoch, pos = divmod(iteration - 1, n)
        if self._epoch_cache[0] != epoch:
            order = np.random.default_rng([self.config.seed, epoch]).permutation(n)
            self._epoch_cache = (epoch, order)
        return self.views.train[int(self._epoch_cache[1][pos])]

    def _train_step(self, iteration: int):
        config = self.config
        image, view = self._next_view(iteration)
        result = rasterize(self.cloud, view, config.background)
        loss, loss_grad = training_loss(result.image, image, config.loss_dssim_weight, config.loss_scale)
        grads = backward(result, loss_grad)
        optimizer_step(self.cloud, grads, self.optimizer, config, iteration, self.extent)
        self.stats.add(grads)
        self.last_loss = loss

    def _densify_due(self, iteration: int) -> bool:
        if iteration % self.config.densify_interval:
            return False
        if self.state.phase == Phase.GROW:
            return iteration <= self.config.densify_until
        if self.state.phase == Phase.DROPPED:
            return iteration <= self.state.dropped_until
        return False

    def _densify(self, iteration: int):
        config = self.config
        rng = np.random.default_rng([config.seed, iteration, _SPLIT_STREAM])
        cloud = densify_and_prune(self.cloud, self.stats, config, self.state.cap, self.extent,
                                  self.optimizer, rng)
        self._replace_cloud(cloud)
        if self.state.phase == Phase.GROW and config.number_control and self.state.cap is not None:
            self.state.cap = int(math.ceil(self.state.cap * config.cap_growth_factor))

    def _validate(self, iteration: int):
        config = self.config
        monitor = validation_monitor(self.cloud, self.views.validation, config.background)
        previous = self.trace.monitors[-1] if len(self.trace) else None
        best_before = self.trace.m_opt
        record = MonitorRecord(
            iteration=iteration,
            gaussian_count=self.cloud.count,
            cap=self.state.cap,
            monitor=monitor,
            train_psnr=pooled_psnr(self.cloud, self.views.train, config.background),
            test_psnr=pooled_psnr(self.cloud, self.views.test, config.background),
            phase=self.state.phase.value)
        self.trace.record(record)
        self.state.rises = self.state.rises + 1 if previous is not None and monitor > previous else 0
        logger.debug(f"迭代 {iteration}: M={monitor:.6g}, 数量 {self.cloud.count}, "
                     f"训练 PSNR {record.train_psnr:.2f}")
        if self.on_record:
            self.on_record(record)

        if self.state.phase == Phase.GROW:
            if config.number_control and config.rise_detection and \
                    detect_overfit(self.trace, config.overfit_window):
                logger.info(f"迭代 {iteration}: 监控值连续上升 {config.overfit_window} 次，判定过拟合")
                self._drop(iteration)
        elif self.state.phase == Phase.REFINE and config.refine_early_stop:
            self.state.stale_checks = 0 if monitor < best_before else self.state.stale_checks + 1
            if self.state.stale_checks >= config.refine_patience:
                logger.info(f"迭代 {iteration}: 监控值 {config.refine_patience} 次未改善，提前结束")
                self.stopped_early = True

    def _drop(self, iteration: int):
        """GROW → DROPPED：丢弃到 Num_opt"""
        config = self.config
        num_opt = self.trace.num_opt if self.trace.num_opt is not None else self.cloud.count
        self.state.num_opt = num_opt
        self.state.grow_end = iteration
        self.state.dropped_until = max(config.densify_until, iteration + config.densify_interval)
        self.state.cap = num_opt
        self._replace_cloud(gaussian_dropout(self.cloud, num_opt, [config.seed, iteration, _DROPOUT_STREAM],
                                             self.optimizer))
        self.state.advance(Phase.DROPPED)

    def _advance_phase(self, iteration: int):
        if self.state.phase == Phase.GROW and iteration >= self.config.densify_until:
            if self.config.number_control:
                self._drop(iteration)
            else:
                self.state.advance(Phase.REFINE)
        if self.state.phase == Phase.DROPPED and iteration >= self.state.dropped_until:
            self.state.advance(Phase.REFINE)

    # ==================== 检查点 ====================

    def _checkpoint_state(self, iteration: int) -> CheckpointState:
        s = self.state
        return CheckpointState(iteration=iteration, phase=s.phase.value, cap=s.cap, rises=s.rises,
                               num_opt=s.num_opt, grow_end=s.grow_end, dropped_until=s.dropped_until,
                               stale_checks=s.stale_checks, config_hash=_config_hash(self.config))

    def _restore(self) -> int:
        """恢复最近检查点，返回下一次迭代号"""
        checkpoint = self.checkpoints.load_latest() if self.checkpoints else None
        if checkpoint is None:
            return 1
        saved = checkpoint.state
        if saved.config_hash and saved.config_hash != _config_hash(self.config):
            raise PreconditionError("检查点与当前训练配置不一致，无法恢复")
        self.cloud = checkpoint.cloud
        self.optimizer = create_optimizer(self.cloud, self.config, self.extent)
        self.optimizer.load_state_arrays(checkpoint.optimizer_arrays)
        self.stats = checkpoint.stats
        self.trace = checkpoint.trace
        self.state = ControllerState(phase=Phase(saved.phase), cap=saved.cap, rises=saved.rises,
                                     num_opt=saved.num_opt, grow_end=saved.grow_end,
                                     dropped_until=saved.dropped_until, stale_checks=saved.stale_checks)
        return saved.iteration + 1

    # ==================== 主循环 ====================

    def run(self, resume: bool = False) -> Tuple[GaussianCloud, MonitorTrace]:
        """
        运行训练

        Args:
            resume: 从最近检查点继续

        Returns:
            (最终点云, 监控记录)
        """
        config = self.config
        start = self._restore() if resume else 1
        total = config.total_iterations
        bar = tqdm(range(start, total + 1), total=total, initial=start - 1, desc='训练',
                   disable=not config.progress_bar, leave=False)
        for iteration in bar:
            self._train_step(iteration)
            if self._densify_due(iteration):
                self._densify(iteration)
            if iteration % config.validation_interval == 0:
                self._validate(iteration)
            self._advance_phase(iteration)
            if config.checkpoint_interval and self.checkpoints and iteration % config.checkpoint_interval == 0:
                self.checkpoints.save(self._checkpoint_state(iteration), self.cloud, self.optimizer,
                                      self.stats, self.trace)
            if self.on_progress:
                self.on_progress(iteration, total)
            if iteration % config.validation_interval == 0:
                bar.set_postfix(n=self.cloud.count, loss=f"{self.last_loss:.4f}", phase=self.state.phase.value)
            if self.stopped_early:
                break
        bar.close()
        logger.info(f"训练结束: {self.cloud.count} 个高斯, M_opt={self.trace.m_opt:.6g}, "
                    f"Num_opt={self.trace.num_opt}")
        return self.cloud, self.trace


def vgnc_train(views: TrainingViews, cloud: GaussianCloud, config: Optional[TrainConfig] = None, *,
               checkpoints: Optional[CheckpointManager] = None, resume: bool = False,
               on_record: Optional[Callable[[MonitorRecord], None]] = None,
               on_progress: Optional[Callable[[int, int], None]] = None) -> Tuple[GaussianCloud, MonitorTrace]:
    """构造 VgncTrainer 并运行"""
    trainer = VgncTrainer(views, cloud, config, checkpoints, on_record, on_progress)
    return trainer.run(resume=resume)
