"""训练检查点持久化模块"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from config import FINAL_CLOUD_NAME, TRACE_NAME
from errors import CheckpointError
from file_handler import atomic_write_json, read_json
from splat.gaussians import PARAMETER_NAMES, GaussianCloud, save_ply
from vgnc.density import DensifyStats
from vgnc.monitor import MonitorTrace
from vgnc.optimizer import Adam

logger = logging.getLogger(__name__)

STATE_FILE = 'state.json'
ARRAYS_FILE = 'arrays.npz'


@dataclass
class CheckpointState:
    """控制器状态"""
    iteration: int
    phase: str
    cap: Optional[int] = None
    rises: int = 0
    num_opt: Optional[int] = None
    grow_end: Optional[int] = None
    dropped_until: Optional[int] = None
    stale_checks: int = 0
    config_hash: str = ''


@dataclass
class Checkpoint:
    """读回的检查点"""
    state: CheckpointState
    cloud: GaussianCloud
    optimizer_arrays: Dict[str, np.ndarray]
    stats: DensifyStats
    trace: MonitorTrace


class CheckpointManager:
    """检查点管理器：每个检查点一个 iter_XXXXXX 目录，state.json 最后写入"""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, iteration: int) -> Path:
        return self.root / f"iter_{iteration:06d}"

    @staticmethod
    def _atomic_savez(filepath: Path, arrays: Dict[str, np.ndarray]):
        """原子写入 npz"""
        temp_file = filepath.with_suffix('.tmp')
        try:
            with open(temp_file, 'wb') as f:
                np.savez(f, **arrays)
            temp_file.replace(filepath)
        except Exception:
            if temp_file.exists():
                temp_file.unlink()
            raise

    # ==================== 保存 ====================

    def save(self, state: CheckpointState, cloud: GaussianCloud, optimizer: Adam,
             stats: DensifyStats, trace: MonitorTrace) -> Path:
        """保存检查点；参数以原始数组保存，恢复后逐位一致"""
        directory = self._dir(state.iteration)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {f"param.{name}": arr for name, arr in cloud.parameters().items()}
        arrays.update(optimizer.state_arrays())
        arrays['stats.grad_accum'] = stats.grad_accum
        arrays['stats.denom'] = stats.denom
        self._atomic_savez(directory / ARRAYS_FILE, arrays)
        save_ply(cloud, directory / FINAL_CLOUD_NAME)
        trace.to_csv(directory / TRACE_NAME)
        atomic_write_json(directory / STATE_FILE, asdict(state))
        logger.debug(f"保存检查点: {directory}")
        return directory

    # ==================== 读取 ====================

    def list_checkpoints(self) -> List[Path]:
        """已完成（含 state.json）的检查点，按迭代升序"""
        return sorted(d for d in self.root.glob('iter_*') if (d / STATE_FILE).exists())

    def load(self, directory: Path) -> Optional[Checkpoint]:
        """读取一个检查点；state.json 缺失返回 None，内容损坏抛出 CheckpointError"""
        state_path = directory / STATE_FILE
        try:
            data = read_json(state_path, strict=True)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"检查点状态损坏: {state_path}: {e}") from e
        if not data:
            return None
        try:
            state = CheckpointState(**data)
        except TypeError as e:
            raise CheckpointError(f"检查点状态字段不匹配: {state_path}: {e}") from e
        with np.load(directory / ARRAYS_FILE) as npz:
            arrays = {key: npz[key] for key in npz.files}
        cloud = GaussianCloud(**{name: arrays[f"param.{name}"] for name in PARAMETER_NAMES})
        optimizer_arrays = {key: arr for key, arr in arrays.items()
                            if key == 'step_count' or key.startswith('exp_avg')}
        stats = DensifyStats(arrays['stats.grad_accum'], arrays['stats.denom'])
        trace = MonitorTrace.from_csv(directory / TRACE_NAME)
        return Checkpoint(state, cloud, optimizer_arrays, stats, trace)

    def load_latest(self) -> Optional[Checkpoint]:
        """最近一个可读的检查点"""
        for directory in reversed(self.list_checkpoints()):
            checkpoint = self.load(directory)
            if checkpoint is not None:
                logger.info(f"从检查点恢复: {directory.name}")
                return checkpoint
        return None
