#!/usr/bin/env python3
"""验证引导高斯数量控制实验工具 - 程序入口"""
import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from config import (ABLATION_NAME, CHECKPOINT_DIR, CORRUPTION_NAME, DEFAULT_OUT_DIR, EVAL_HEADER,
                    EVAL_NAME, EVAL_SUMMARY_NAME, FINAL_CLOUD_NAME, INIT_CLOUD_NAME, REPORT_HEADER,
                    REPORT_NAME, SUMMARY_NAME, SWEEP_NAME, TRACE_NAME, DetectorConfig, FilterConfig,
                    InitConfig, MatchConfig, RansacConfig, SynthConfig, TrainConfig, build_config,
                    load_config_file)
from errors import PreconditionError, VgncError
from file_handler import FileHandler
from harness import (emit_plots, evaluate_cloud, joint_initialize, load_scene, read_corruption_csv,
                     run_ablation, run_sweep, score_filter, synth_scene, write_ablation_csv,
                     write_sweep_csv)
from splat import load_ply, save_ply, storage_megabytes
from valfilter import dump_pair_details, filter_generated_set, read_report_csv
from vgnc import CheckpointManager, VgncTrainer, pooled_psnr

logger = logging.getLogger(__name__)


# ==================== 配置 ====================

class RunContext:
    """一次命令行运行：配置与输出目录"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        file_values = load_config_file(args.config) if args.config else None
        seed = args.seed
        self.train = build_config(TrainConfig, file_values, seed=seed)
        self.filter = build_config(FilterConfig, file_values)
        self.synth = build_config(SynthConfig, file_values, seed=seed)
        self.match = build_config(MatchConfig, file_values)
        self.ransac = build_config(RansacConfig, file_values, seed=seed)
        self.detector = build_config(DetectorConfig, file_values)
        self.init = build_config(InitConfig, file_values)
        self.out = FileHandler(args.out)
        self.workers = max(1, args.workers)

    def kept_generated(self) -> Optional[List[int]]:
        """--report 给出时取保留的生成视图，否则 None（全部）"""
        report = getattr(self.args, 'report', None)
        if not report:
            return None
        kept = [e.gen_index for e in read_report_csv(report) if e.kept]
        logger.info(f"筛选报告 {report}: 保留 {len(kept)} 个生成视图")
        return kept

    def initial_cloud(self, scene, kept):
        init_path = getattr(self.args, 'init', None)
        if init_path:
            return load_ply(init_path)
        joint = not getattr(self.args, 'no_joint', False)
        if joint and kept is None:
            kept = list(range(len(scene.indices('generated'))))
        return joint_initialize(scene, kept if joint else (), self.init,
                                detector_config=self.detector, match_config=self.match,
                                workers=self.workers)


# ==================== 子命令 ====================

def cmd_synth(ctx: RunContext) -> int:
    result = synth_scene(ctx.synth, ctx.out.out_dir)
    print(f"场景已写出: {result.manifest_path}")
    return 0


def cmd_filter(ctx: RunContext) -> int:
    scene = load_scene(ctx.args.scene)
    kept, report = filter_generated_set(
        scene.images_for('train'), scene.images_for('generated'), scene.intrinsics, ctx.filter,
        detector_config=ctx.detector, match_config=ctx.match, ransac_config=ctx.ransac,
        workers=ctx.workers, keep_details=ctx.args.dump)
    path = ctx.out.write_csv(REPORT_NAME, REPORT_HEADER, report.to_csv_rows())
    if ctx.args.dump:
        dump_pair_details(report, ctx.out)
    print(f"保留 {len(kept)}/{len(report.entries)} 个生成视图 (τ={report.tau:g}) -> {path}")
    return 0


def cmd_init(ctx: RunContext) -> int:
    scene = load_scene(ctx.args.scene)
    cloud = ctx.initial_cloud(scene, ctx.kept_generated())
    path = save_ply(cloud, ctx.out.resolve(INIT_CLOUD_NAME))
    print(f"初始点云 {cloud.count} 个高斯 -> {path}")
    return 0


def cmd_train(ctx: RunContext) -> int:
    args = ctx.args
    scene = load_scene(args.scene)
    kept = ctx.kept_generated()
    views = scene.training_views(kept)
    config = ctx.train
    if args.no_number_control:
        config = replace(config, number_control=False)
    checkpoints = CheckpointManager(ctx.out.resolve(CHECKPOINT_DIR)) if config.checkpoint_interval else None
    if args.resume and checkpoints is None:
        raise PreconditionError("--resume 需要 checkpoint_interval > 0")

    start = time.perf_counter()
    trainer = VgncTrainer(views, ctx.initial_cloud(scene, kept), config, checkpoints)
    cloud, trace = trainer.run(resume=args.resume)
    elapsed = time.perf_counter() - start

    cloud_path = save_ply(cloud, ctx.out.resolve(FINAL_CLOUD_NAME))
    trace.to_csv(ctx.out.resolve(TRACE_NAME))
    state = trainer.state
    summary = {
        'num_gaussians': cloud.count,
        'num_opt': state.num_opt,
        'trace_num_opt': trace.num_opt,
        'm_opt': trace.m_opt if trace.records else None,
        'opt_iteration': trace.opt_iteration,
        'grow_end': state.grow_end,
        'phase': state.phase.value,
        'stopped_early': trainer.stopped_early,
        'train_psnr': pooled_psnr(cloud, views.train, config.background),
        'test_psnr': pooled_psnr(cloud, views.test, config.background),
        'validation_views': len(views.validation),
        'storage_mb': storage_megabytes(cloud_path),
        'train_seconds': elapsed,
        'seed': config.seed,
        'number_control': config.number_control,
    }
    ctx.out.write_json(SUMMARY_NAME, summary)
    print(f"训练完成: {cloud.count} 个高斯, Num_opt={state.num_opt}, 用时 {elapsed:.1f}s")
    return 0


def cmd_sweep(ctx: RunContext) -> int:
    args = ctx.args
    scene = load_scene(args.scene)
    kept = ctx.kept_generated()
    views = scene.training_views(kept)
    caps = parse_caps(args.caps)
    entries = run_sweep(views, ctx.initial_cloud(scene, kept), caps, ctx.train,
                        workers=ctx.workers, out=ctx.out.subdir('entries'))
    path = write_sweep_csv(entries, ctx.out, SWEEP_NAME)
    print(f"扫描 {len(entries)} 个上限 -> {path}")
    return 0


def cmd_ablation(ctx: RunContext) -> int:
    scene = load_scene(ctx.args.scene)
    kept = ctx.kept_generated()
    if kept is None:
        kept = list(range(len(scene.indices('generated'))))
    entries = run_ablation(scene, kept, ctx.train, ctx.init, detector_config=ctx.detector,
                           match_config=ctx.match, workers=ctx.workers, out=ctx.out.subdir('ablation'))
    path = write_ablation_csv(entries, ctx.out, ABLATION_NAME)
    print(f"消融实验 {len(entries)} 组 -> {path}")
    return 0


def cmd_eval(ctx: RunContext) -> int:
    args = ctx.args
    scene = load_scene(args.scene)
    cloud = load_ply(args.cloud)
    role = args.role
    samples = scene.views(role)
    names = [scene.manifest.entries[i].path for i in scene.indices(role)]
    summary = evaluate_cloud(cloud, samples, names, ctx.train.background, storage_megabytes(args.cloud))
    ctx.out.write_csv(EVAL_NAME, EVAL_HEADER, [v.to_row() for v in summary.views])
    data = summary.as_dict()

    if args.report:
        corruption_path = Path(args.corruption) if args.corruption else scene.root / CORRUPTION_NAME
        kept = [e.gen_index for e in read_report_csv(args.report) if e.kept]
        data['filter'] = score_filter(kept, read_corruption_csv(corruption_path))
    ctx.out.write_json(EVAL_SUMMARY_NAME, data)
    print(f"{role} 视图 {len(samples)} 个: PSNR {summary.mean_psnr:.2f} dB, SSIM {summary.mean_ssim:.4f}")
    return 0


def cmd_plot(ctx: RunContext) -> int:
    csv_path = Path(ctx.args.csv)
    name = ctx.args.name or f"{csv_path.stem}.svg"
    path = emit_plots(csv_path, ctx.out.resolve(name))
    print(f"图表 -> {path}")
    return 0


# ==================== 参数 ====================

def parse_caps(text: str) -> List[int]:
    try:
        caps = [int(c) for c in text.split(',') if c.strip()]
    except ValueError:
        raise PreconditionError(f"上限列表无效: {text}") from None
    if not caps or any(c < 1 for c in caps):
        raise PreconditionError(f"上限列表必须为正整数: {text}")
    return caps


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vgnc', description='验证引导的高斯数量控制实验工具')
    parser.add_argument('--config', help='key=value 配置文件')
    parser.add_argument('--seed', type=int, default=None, help='随机种子（覆盖配置文件）')
    parser.add_argument('--out', default=DEFAULT_OUT_DIR, help='输出目录')
    parser.add_argument('--workers', type=int, default=1, help='并行线程数')
    parser.add_argument('--verbose', '-v', action='store_true', help='输出调试日志')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('synth', help='生成合成场景')

    p = sub.add_parser('filter', help='筛选生成视图')
    p.add_argument('--scene', required=True)
    p.add_argument('--dump', action='store_true', help='写出逐对匹配与置信度图')

    for name, help_text in (('init', '初始化点云'), ('train', '训练'), ('sweep', '数量上限扫描'),
                            ('ablation', '联合初始化 × 数量控制 消融')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--scene', required=True)
        p.add_argument('--report', help='filter 生成的报告（决定验证集与联合初始化视图）')
        if name != 'ablation':
            p.add_argument('--init', help='已有初始点云 PLY')
            p.add_argument('--no-joint', action='store_true', help='只用训练视图初始化')
        if name == 'train':
            p.add_argument('--no-number-control', action='store_true', help='关闭数量控制')
            p.add_argument('--resume', action='store_true', help='从最近检查点继续')
        if name == 'sweep':
            p.add_argument('--caps', required=True, help='逗号分隔的上限列表')

    p = sub.add_parser('eval', help='评估点云')
    p.add_argument('--scene', required=True)
    p.add_argument('--cloud', required=True)
    p.add_argument('--role', default='test', choices=('train', 'test', 'generated'))
    p.add_argument('--report', help='同时给筛选结果打分')
    p.add_argument('--corruption', help='污染记录 CSV（默认取场景目录下的）')

    p = sub.add_parser('plot', help='CSV 转 SVG')
    p.add_argument('--csv', required=True)
    p.add_argument('--name', help='输出文件名')
    return parser


COMMANDS = {
    'synth': cmd_synth,
    'filter': cmd_filter,
    'init': cmd_init,
    'train': cmd_train,
    'sweep': cmd_sweep,
    'ablation': cmd_ablation,
    'eval': cmd_eval,
    'plot': cmd_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    """程序入口"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
    try:
        ctx = RunContext(args)
        return COMMANDS[args.command](ctx)
    except (VgncError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
