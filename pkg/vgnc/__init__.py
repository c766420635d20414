"""训练模块"""
from .checkpoint import Checkpoint, CheckpointManager, CheckpointState
from .density import DensifyStats, densify_and_prune, gaussian_dropout, scene_extent
from .loss import training_loss
from .monitor import MonitorRecord, MonitorTrace, detect_overfit, validation_monitor
from .optimizer import Adam, create_optimizer, expon_lr, learning_rates, optimizer_step
from .trainer import ControllerState, Phase, TrainingViews, VgncTrainer, pooled_psnr, vgnc_train

__all__ = [
    'Checkpoint',
    'CheckpointManager',
    'CheckpointState',
    'DensifyStats',
    'densify_and_prune',
    'gaussian_dropout',
    'scene_extent',
    'training_loss',
    'MonitorRecord',
    'MonitorTrace',
    'detect_overfit',
    'validation_monitor',
    'Adam',
    'create_optimizer',
    'expon_lr',
    'learning_rates',
    'optimizer_step',
    'ControllerState',
    'Phase',
    'TrainingViews',
    'VgncTrainer',
    'pooled_psnr',
    'vgnc_train',
]
