"""Adam 优化器（按参数组设置学习率）

状态数组与参数逐行对齐；致密化 / 丢弃时通过 take / extend 同步增删行，
新增行的一二阶矩为零。
"""
from typing import Dict, Optional

import numpy as np

from config import TrainConfig
from errors import AlignmentError
from splat.gaussians import GaussianCloud
from splat.rasterizer import CloudGradients

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


class Adam:
    """按名称分组的 Adam"""

    def __init__(self, params: Dict[str, np.ndarray], lrs: Dict[str, float],
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        missing = set(params) - set(lrs)
        if missing:
            raise KeyError(f"缺少学习率: {sorted(missing)}")
        self.lrs = dict(lrs)
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(arr, dtype=np.float64) for name, arr in params.items()}
        self.exp_avg_sq = {name: np.zeros_like(arr, dtype=np.float64) for name, arr in params.items()}

    @property
    def rows(self) -> int:
        first = next(iter(self.exp_avg.values()), None)
        return 0 if first is None else len(first)

    def check_aligned(self, params: Dict[str, np.ndarray]):
        for name, arr in params.items():
            state = self.exp_avg.get(name)
            if state is None or state.shape != np.shape(arr):
                raise AlignmentError(
                    f"优化器状态 {name} 形状 {None if state is None else state.shape} 与参数 {np.shape(arr)} 不一致")

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        """原地更新 params"""
        self.check_aligned(params)
        self.step_count += 1
        beta1, beta2 = self.betas
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for name, arr in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != arr.shape:
                raise AlignmentError(f"梯度 {name} 形状 {g.shape} 与参数 {arr.shape} 不一致")
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            arr -= self.lrs[name] * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    # ==================== 行同步 ====================

    def take(self, indices: np.ndarray):
        """按索引或掩码保留行"""
        for store in (self.exp_avg, self.exp_avg_sq):
            for name in store:
                store[name] = store[name][indices]

    def extend(self, count: int):
        """追加 count 行零状态"""
        for store in (self.exp_avg, self.exp_avg_sq):
            for name, arr in store.items():
                store[name] = np.concatenate([arr, np.zeros((count,) + arr.shape[1:])])

    # ==================== 持久化 ====================

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {'step_count': np.array(self.step_count)}
        for name in self.exp_avg:
            arrays[f"exp_avg.{name}"] = self.exp_avg[name]
            arrays[f"exp_avg_sq.{name}"] = self.exp_avg_sq[name]
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        self.step_count = int(arrays['step_count'])
        for name in self.exp_avg:
            self.exp_avg[name] = np.array(arrays[f"exp_avg.{name}"], dtype=np.float64)
            self.exp_avg_sq[name] = np.array(arrays[f"exp_avg_sq.{name}"], dtype=np.float64)


# ==================== 学习率 ====================

def expon_lr(lr_init: float, lr_final: float, step: int, max_steps: int) -> float:
    """对数线性插值的指数衰减"""
    if max_steps <= 0 or lr_init <= 0 or lr_final <= 0:
        return lr_init
    t = np.clip(step / max_steps, 0.0, 1.0)
    return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))


def learning_rates(config: TrainConfig, extent: float, iteration: int = 0) -> Dict[str, float]:
    """各参数组学习率；位置学习率随场景尺度缩放并按迭代衰减"""
    return {
        'means': expon_lr(config.position_lr_init * extent, config.position_lr_final * extent,
                          iteration, config.total_iterations),
        'log_scales': config.scaling_lr,
        'rotations': config.rotation_lr,
        'opacity_logits': config.opacity_lr,
        'colors': config.color_lr,
    }


def create_optimizer(cloud: GaussianCloud, config: TrainConfig, extent: float) -> Adam:
    return Adam(cloud.parameters(), learning_rates(config, extent))


def optimizer_step(cloud: GaussianCloud, grads: CloudGradients, optimizer: Adam,
                   config: Optional[TrainConfig] = None, iteration: Optional[int] = None,
                   extent: float = 1.0) -> GaussianCloud:
    """
    一步 Adam 更新（原地），之后颜色截断到 [0,1]、四元数归一化

    Args:
        cloud: 点云
        grads: 与点云对齐的梯度
        optimizer: Adam 状态
        config: 给出时按 iteration 更新位置学习率
        iteration: 当前迭代
        extent: 场景尺度

    Returns:
        更新后的点云（同一对象）
    """
    if optimizer.rows != cloud.count:
        raise AlignmentError(f"优化器行数 {optimizer.rows} 与点云 {cloud.count} 不一致")
    if config is not None and iteration is not None:
        optimizer.lrs['means'] = learning_rates(config, extent, iteration)['means']
    optimizer.step(cloud.parameters(), grads.parameters())
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
    cloud.normalize_rotations()
    return cloud
