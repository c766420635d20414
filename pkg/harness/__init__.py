"""实验外围模块：场景读写、合成场景、初始化、扫描、评估与绘图"""
from .colmap import import_colmap, read_cameras_text, read_images_text
from .evaluation import EvalSummary, ViewMetrics, evaluate_cloud, evaluate_views, score_filter
from .initializer import initialize_from_views, joint_initialize
from .plots import emit_plots, read_plot_csv
from .scene import Scene, SceneEntry, SceneManifest, load_scene, read_manifest, write_manifest, write_scene
from .sweep import (AblationEntry, SweepEntry, run_ablation, run_sweep, write_ablation_csv,
                    write_sweep_csv)
from .synth import (CorruptionRecord, SynthResult, corrupt_with_noise, corrupt_with_patches,
                    read_corruption_csv, synth_scene)

__all__ = [
    'import_colmap',
    'read_cameras_text',
    'read_images_text',
    'EvalSummary',
    'ViewMetrics',
    'evaluate_cloud',
    'evaluate_views',
    'score_filter',
    'initialize_from_views',
    'joint_initialize',
    'emit_plots',
    'read_plot_csv',
    'Scene',
    'SceneEntry',
    'SceneManifest',
    'load_scene',
    'read_manifest',
    'write_manifest',
    'write_scene',
    'AblationEntry',
    'SweepEntry',
    'run_ablation',
    'run_sweep',
    'write_ablation_csv',
    'write_sweep_csv',
    'CorruptionRecord',
    'SynthResult',
    'corrupt_with_noise',
    'corrupt_with_patches',
    'read_corruption_csv',
    'synth_scene',
]
