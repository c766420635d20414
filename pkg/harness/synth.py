"""合成场景生成

真值高斯点云 + 圆弧上的训练 / 测试相机；“生成视图”位于相邻训练视图之间，
部分视图加入噪声或噪声块，模拟生成模型的幻觉内容。
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import CORRUPTION_HEADER, CORRUPTION_NAME, GT_CLOUD_NAME, SynthConfig
from errors import PreconditionError, ReportFormatError
from file_handler import FileHandler
from geometry.camera import CameraIntrinsics, CameraView, Pose, look_at
from harness.scene import SceneEntry, SceneManifest, write_scene
from splat.gaussians import GaussianCloud, inverse_sigmoid, save_ply
from splat.rasterizer import render

logger = logging.getLogger(__name__)

GT_SCALE_RANGE = (0.03, 0.12)      # 相对 scene_radius
GT_OPACITY_RANGE = (0.5, 0.95)
GT_COLOR_RANGE = (0.05, 0.95)
PATCH_SIDE_RANGE = (1.0 / 8.0, 1.0 / 3.0)
MAX_PATCH_ATTEMPTS = 1000


@dataclass(frozen=True)
class CorruptionRecord:
    gen_index: int
    kind: str                  # clean / noise / patch
    noise_sigma: float = 0.0
    patch_fraction: float = 0.0

    def to_row(self) -> Tuple:
        return self.gen_index, self.kind, repr(self.noise_sigma), repr(self.patch_fraction)


@dataclass
class SynthResult:
    manifest_path: Path
    manifest: SceneManifest
    ground_truth: GaussianCloud
    corruption: List[CorruptionRecord]


# ==================== 真值与相机 ====================

def sample_ground_truth(config: SynthConfig, rng: np.random.Generator) -> GaussianCloud:
    """球内均匀分布的随机各向异性高斯"""
    n = config.gaussian_count
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = config.scene_radius * rng.random(n) ** (1.0 / 3.0)
    means = directions * radii[:, None]
    lo, hi = GT_SCALE_RANGE
    log_scales = rng.uniform(np.log(lo * config.scene_radius), np.log(hi * config.scene_radius), (n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = rng.uniform(*GT_OPACITY_RANGE, n)
    colors = rng.uniform(*GT_COLOR_RANGE, (n, 3))
    return GaussianCloud(means, log_scales, rotations, inverse_sigmoid(opacities), colors)


def synth_intrinsics(config: SynthConfig) -> CameraIntrinsics:
    return CameraIntrinsics(config.focal, config.focal, (config.width - 1) / 2.0,
                            (config.height - 1) / 2.0, config.width, config.height)


def arc_pose(config: SynthConfig, azimuth_deg: float) -> Pose:
    """圆弧上朝向原点的相机（y 轴朝下，仰角为正时相机在上方）"""
    az = np.radians(azimuth_deg)
    el = np.radians(config.elevation_degrees)
    r = config.camera_radius
    eye = r * np.array([np.cos(el) * np.sin(az), -np.sin(el), -np.cos(el) * np.cos(az)])
    return look_at(eye, np.zeros(3))


def _evenly(count: int, half_arc: float) -> np.ndarray:
    if count == 1:
        return np.zeros(1)
    return np.linspace(-half_arc, half_arc, count)


def train_azimuths(config: SynthConfig) -> np.ndarray:
    return _evenly(config.n_train, config.arc_degrees / 2.0)


def test_azimuths(config: SynthConfig) -> np.ndarray:
    """测试视图取在圆弧内部的等分点"""
    half = config.arc_degrees / 2.0
    return np.linspace(-half, half, config.n_test + 2)[1:-1]


def generated_azimuths(config: SynthConfig) -> np.ndarray:
    """
    生成视图按轮转分配到相邻训练视图对之间，在每对内等分插值；
    只有一个训练视图时以圆弧两端为一对。
    """
    train = train_azimuths(config)
    half = config.arc_degrees / 2.0
    pairs = list(zip(train[:-1], train[1:])) if len(train) > 1 else [(-half, half)]
    per_pair = [len(range(p, config.n_generated, len(pairs))) for p in range(len(pairs))]
    out = np.zeros(config.n_generated)
    for g in range(config.n_generated):
        p, j = g % len(pairs), g // len(pairs)
        a, b = pairs[p]
        t = (j + 1) / (per_pair[p] + 1)
        out[g] = (1.0 - t) * a + t * b
    return out


# ==================== 污染 ====================

def corrupt_with_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """加性高斯噪声，结果截断到 [0,1]"""
    return np.clip(image + rng.normal(scale=sigma, size=image.shape), 0.0, 1.0)


def corrupt_with_patches(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """随机矩形块替换为均匀噪声，直到覆盖率 ≥ fraction"""
    out = np.array(image, dtype=np.float64, copy=True)
    if fraction <= 0:
        return out
    h, w = out.shape[:2]
    if fraction >= 1:
        return rng.random(out.shape)
    covered = np.zeros((h, w), dtype=bool)
    lo, hi = PATCH_SIDE_RANGE
    for _ in range(MAX_PATCH_ATTEMPTS):
        if covered.mean() >= fraction:
            break
        ph = max(1, int(round(h * rng.uniform(lo, hi))))
        pw = max(1, int(round(w * rng.uniform(lo, hi))))
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        out[y0:y0 + ph, x0:x0 + pw] = rng.random((ph, pw) + out.shape[2:])
        covered[y0:y0 + ph, x0:x0 + pw] = True
    return out


def _corruption_plan(config: SynthConfig, rng: np.random.Generator) -> List[CorruptionRecord]:
    """被污染的生成视图中交替使用噪声与噪声块"""
    n = config.n_generated
    n_bad = int(round(config.corrupt_fraction * n))
    bad = np.sort(rng.choice(n, n_bad, replace=False)) if n_bad else np.zeros(0, dtype=int)
    plan = [CorruptionRecord(j, 'clean') for j in range(n)]
    for order, j in enumerate(bad):
        if order % 2 == 0:
            plan[j] = CorruptionRecord(int(j), 'noise', noise_sigma=config.noise_sigma)
        else:
            plan[j] = CorruptionRecord(int(j), 'patch', patch_fraction=config.patch_fraction)
    return plan


def apply_corruption(image: np.ndarray, record: CorruptionRecord, rng: np.random.Generator) -> np.ndarray:
    if record.kind == 'noise':
        return corrupt_with_noise(image, record.noise_sigma, rng)
    if record.kind == 'patch':
        return corrupt_with_patches(image, record.patch_fraction, rng)
    return image


# ==================== 场景生成 ====================

def synth_scene(config: Optional[SynthConfig], root,
                corruption: Optional[Sequence[CorruptionRecord]] = None) -> SynthResult:
    """
    生成合成场景并写出到 root

    Args:
        config: 合成配置
        root: 输出目录
        corruption: 显式指定每个生成视图的污染方式（默认按 corrupt_fraction 随机分配）

    Returns:
        SynthResult
    """
    config = config or SynthConfig()
    handler = FileHandler(root)
    rng = np.random.default_rng(config.seed)
    truth = sample_ground_truth(config, rng)
    k = synth_intrinsics(config)

    plan_rng, noise_rng = (np.random.default_rng([config.seed, stream]) for stream in (1, 2))
    plan = list(corruption) if corruption is not None else _corruption_plan(config, plan_rng)
    if len(plan) != config.n_generated:
        raise PreconditionError(f"污染计划长度 {len(plan)} 与 n_generated {config.n_generated} 不一致")

    entries: List[SceneEntry] = []
    images: List[np.ndarray] = []
    roles = (('train', 'train', train_azimuths(config)),
             ('test', 'test', test_azimuths(config)),
             ('generated', 'gen', generated_azimuths(config)))
    for role, prefix, azimuths in roles:
        for idx, az in enumerate(azimuths):
            pose = arc_pose(config, float(az))
            image = render(truth, CameraView(k, pose), config.background)
            if role == 'generated':
                image = apply_corruption(image, plan[idx], noise_rng)
            entries.append(SceneEntry(role, f"images/{prefix}_{idx:03d}.png", pose))
            images.append(image)

    manifest = SceneManifest(k, entries)
    manifest_path = write_scene(manifest, images, handler.out_dir)
    save_ply(truth, handler.resolve(GT_CLOUD_NAME))
    handler.write_csv(CORRUPTION_NAME, CORRUPTION_HEADER, [r.to_row() for r in plan])
    n_bad = sum(r.kind != 'clean' for r in plan)
    logger.info(f"合成场景: {config.gaussian_count} 个真值高斯, 训练 {config.n_train}, "
                f"测试 {config.n_test}, 生成 {config.n_generated}（污染 {n_bad}）")
    return SynthResult(manifest_path, manifest, truth, plan)


def read_corruption_csv(path) -> List[CorruptionRecord]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != CORRUPTION_HEADER:
            raise ReportFormatError(f"污染记录表头不符: {header}")
        try:
            return [CorruptionRecord(int(r[0]), r[1], float(r[2]), float(r[3])) for r in reader if r]
        except (ValueError, IndexError) as e:
            raise ReportFormatError(f"污染记录格式错误: {e}") from None
