"""配置管理模块"""
import typing
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

from errors import ConfigError

# 文件读取缓冲区
BUFFER_SIZE = 64 * 1024  # 64KB

# 默认输出目录
DEFAULT_OUT_DIR = 'runs'

# 渲染器配置
NEAR_PLANE = 0.01             # 近裁剪面
ALPHA_MIN = 1.0 / 255.0       # 低于该值的贡献跳过
ALPHA_MAX = 0.99              # 单个高斯的不透明度上限
TRANSMITTANCE_MIN = 1e-4      # 透射率低于该值时终止
COV2D_DILATION = 0.3          # 二维协方差对角线膨胀（像素²）
COV2D_EIGEN_FLOOR = 1e-6      # 二维协方差特征值下限
EXTENT_SIGMAS = 3.035         # 二维高斯 99% 质量半径（单位：标准差）

# 指标配置
PSNR_CAP = 120.0              # MSE < 1e-12 时的 PSNR 上限
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# 特征检测
INPUT_BLUR = 0.5              # 输入图像假定的模糊
ORI_HIST_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0
ORI_PEAK_RATIO = 0.8
DESCR_SCALE_FACTOR = 3.0
DESCR_MAG_CLIP = 0.2
MAX_SUBPIXEL_OFFSET = 1.5
MIN_DETECT_SIZE = 16
MIN_OCTAVE_SIZE = 8
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# 几何容差
ROTATION_TOLERANCE = 1e-9
BEHIND_CAMERA_EPS = 1e-8
BASELINE_EPS = 1e-8
PARALLEL_EPS = 1e-10
ESSENTIAL_RANK_TOLERANCE = 1e-6

# 初始化
INIT_OPACITY = 0.1

# 场景清单
MANIFEST_MAGIC = 'VGNC-SCENE'
MANIFEST_VERSION = 1
SCENE_ROLES = ('train', 'test', 'generated')

# 输出文件名
MANIFEST_NAME = 'scene.txt'
GT_CLOUD_NAME = 'gt_cloud.ply'
CORRUPTION_NAME = 'corruption.csv'
REPORT_NAME = 'filter_report.csv'
INIT_CLOUD_NAME = 'init_cloud.ply'
FINAL_CLOUD_NAME = 'cloud.ply'
TRACE_NAME = 'trace.csv'
SWEEP_NAME = 'sweep.csv'
EVAL_NAME = 'eval.csv'
EVAL_SUMMARY_NAME = 'eval_summary.json'
ABLATION_NAME = 'ablation.csv'
SUMMARY_NAME = 'summary.json'
CHECKPOINT_DIR = 'checkpoints'

# CSV 表头
REPORT_HEADER = ('gen_index', 'closest_input', 'n_min', 'n_total', 'kept')
TRACE_HEADER = ('iter', 'num_gaussians', 'cap', 'monitor', 'train_psnr', 'test_psnr', 'phase')
SWEEP_HEADER = ('cap', 'num_gaussians', 'train_psnr', 'test_psnr', 'test_ssim', 'monitor')
EVAL_HEADER = ('view', 'psnr', 'ssim')
CORRUPTION_HEADER = ('gen_index', 'kind', 'noise_sigma', 'patch_fraction')
ABLATION_HEADER = ('joint_init', 'number_control', 'num_gaussians', 'train_psnr', 'test_psnr', 'test_ssim')

# 评估
MILD_NOISE_SIGMA = 0.05       # 不超过该噪声的生成视图视为应当保留


@dataclass
class DetectorConfig:
    """DoG 特征检测配置"""
    n_octaves: int = 4
    n_scales: int = 3
    sigma: float = 1.6
    contrast_threshold: float = 0.02
    edge_ratio: float = 10.0
    descriptor_width: int = 4
    descriptor_bins: int = 8
    max_features: Optional[int] = None
    upsample: bool = True            # 检测前放大一倍


@dataclass
class MatchConfig:
    """描述子匹配配置"""
    ratio: float = 0.75
    max_matches: Optional[int] = None
    mutual_check: bool = True
    max_distance: float = 0.5        # B 侧只有一个特征时的绝对距离上限（单位描述子）

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"ratio 必须在 (0,1) 内: {self.ratio}")
        if self.max_distance <= 0:
            raise ConfigError(f"max_distance 必须 > 0: {self.max_distance}")


@dataclass
class RansacConfig:
    """RANSAC 配置"""
    max_iterations: int = 2000
    sampson_threshold: float = 1.0   # 像素
    min_inliers: int = 15
    seed: int = 0
    confidence: float = 0.999        # 自适应提前终止

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations 必须 ≥ 1: {self.max_iterations}")
        if self.sampson_threshold <= 0:
            raise ConfigError(f"sampson_threshold 必须 > 0: {self.sampson_threshold}")


@dataclass
class FilterConfig:
    """生成视图筛选配置"""
    sigma: float = 0.25
    theta: float = 0.5
    tau_fraction: float = 0.10
    max_fill_radius: int = 2
    warp_depth: str = 'unit'            # 'unit'（d=1，单位平移）或 'median'
    rotation_preference: float = 0.95
    max_rotation_parallax: float = 2.0  # 像素；纯旋转残差中位数不超过它时按旋转处理

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma 必须 > 0: {self.sigma}")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta 必须在 (0,1) 内: {self.theta}")
        if not 0.0 <= self.tau_fraction <= 1.0:
            raise ConfigError(f"tau_fraction 必须在 [0,1] 内: {self.tau_fraction}")
        if self.warp_depth not in ('median', 'unit'):
            raise ConfigError(f"未知的 warp_depth: {self.warp_depth}")
        if self.max_rotation_parallax < 0:
            raise ConfigError(f"max_rotation_parallax 不能为负: {self.max_rotation_parallax}")


@dataclass
class TrainConfig:
    """训练配置"""
    total_iterations: int = 10000
    densify_until: int = 5000
    densify_interval: int = 100
    validation_interval: int = 100
    grad_threshold: float = 0.0002
    split_scale_threshold: float = 0.01
    prune_opacity: float = 0.005
    count_cap_initial: Optional[int] = None
    cap_growth_factor: float = 1.3
    loss_dssim_weight: float = 0.2
    loss_scale: float = 1.0
    position_lr_init: float = 0.00016
    position_lr_final: float = 0.0000016
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    opacity_lr: float = 0.05
    color_lr: float = 0.0025
    overfit_window: int = 3
    seed: int = 0
    number_control: bool = True
    rise_detection: bool = True
    refine_early_stop: bool = False
    refine_patience: int = 10
    checkpoint_interval: int = 0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    progress_bar: bool = True

    def __post_init__(self):
        if not 0 < self.validation_interval <= self.densify_until:
            raise ConfigError(
                f"需要 0 < validation_interval ≤ densify_until: "
                f"{self.validation_interval}, {self.densify_until}")
        if not 0.0 <= self.loss_dssim_weight < 1.0:
            raise ConfigError(f"loss_dssim_weight 必须在 [0,1) 内: {self.loss_dssim_weight}")
        if self.overfit_window < 1:
            raise ConfigError(f"overfit_window 必须 ≥ 1: {self.overfit_window}")
        if self.densify_interval < 1:
            raise ConfigError(f"densify_interval 必须 ≥ 1: {self.densify_interval}")
        self.background = tuple(float(c) for c in self.background)


@dataclass
class SynthConfig:
    """合成场景配置"""
    gaussian_count: int = 500
    width: int = 64
    height: int = 64
    focal: float = 64.0
    n_train: int = 3
    n_test: int = 8
    n_generated: int = 20
    arc_degrees: float = 60.0
    elevation_degrees: float = 15.0
    camera_radius: float = 4.0
    scene_radius: float = 1.0
    corrupt_fraction: float = 0.0
    noise_sigma: float = 0.05
    patch_fraction: float = 0.3
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ('gaussian_count', 'width', 'height', 'n_train', 'n_test'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须 ≥ 1")
        if self.n_generated < 0:
            raise ConfigError("n_generated 不能为负")
        for name in ('corrupt_fraction', 'patch_fraction'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} 必须在 [0,1] 内")
        self.background = tuple(float(c) for c in self.background)


@dataclass
class InitConfig:
    """联合初始化配置"""
    scale_factor: float = 0.5
    merge_fraction: float = 0.001
    max_reprojection_error: float = 2.0
    knn: int = 3
    initial_opacity: float = INIT_OPACITY


CONFIG_CLASSES = (TrainConfig, FilterConfig, SynthConfig, MatchConfig,
                  RansacConfig, DetectorConfig, InitConfig)


# ==================== 配置文件 ====================

def load_config_file(path) -> Dict[str, Tuple[str, int]]:
    """
    读取 key=value 配置文件
    Returns:
        {key: (原始值, 行号)}
    """
    known = {f.name for cls in CONFIG_CLASSES for f in fields(cls)}
    values: Dict[str, Tuple[str, int]] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"第 {lineno} 行缺少 '=': {raw.rstrip()}")
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in known:
                raise ConfigError(f"第 {lineno} 行未知配置项: {key}")
            values[key] = (value, lineno)
    return values


def _coerce(value: str, annotation, key: str, lineno: int):
    """按字段注解转换字符串"""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is typing.Union and type(None) in args:
            if value.lower() in ('none', 'null', ''):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(value, inner, key, lineno)
        if origin is tuple:
            parts = [p.strip() for p in value.split(',') if p.strip()]
            return tuple(_coerce(p, args[0], key, lineno) for p in parts)
        if annotation is bool:
            lowered = value.lower()
            if lowered in ('true', '1', 'yes', 'on'):
                return True
            if lowered in ('false', '0', 'no', 'off'):
                return False
            raise ValueError(value)
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
        return value
    except (ValueError, StopIteration):
        raise ConfigError(f"第 {lineno} 行 {key} 的值无效: {value}") from None


def build_config(cls, file_values: Optional[Dict[str, Tuple[str, int]]] = None, **overrides):
    """用配置文件内容与显式覆盖项构造配置数据类"""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if file_values and f.name in file_values:
            raw, lineno = file_values[f.name]
            kwargs[f.name] = _coerce(raw, hints[f.name], f.name, lineno)
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)
