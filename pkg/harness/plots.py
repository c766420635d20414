"""监控记录 / 扫描结果 CSV 转 SVG 折线图（matplotlib）

每个数值列画在独立的面板中（各自的纵轴），横轴为 cap 时取对数。
固定 svg.hashsalt 并去掉日期元数据，相同输入得到逐字节相同的文件。
"""
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from errors import PlotParseError
from file_handler import atomic_write_text

FIG_WIDTH = 6.4          # 英寸
PANEL_HEIGHT = 1.8       # 英寸
SVG_HASH_SALT = 'vgnc'
X_COLUMNS = ('iter', 'cap')


@dataclass
class PlotData:
    x_name: str
    log_x: bool
    series: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)


def _to_float(text: str) -> Optional[float]:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def read_plot_csv(path) -> PlotData:
    """解析 CSV：横轴取 iter / cap 列（都没有时取第一列），其余全数值列为数据序列"""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise PlotParseError(f"{path} 为空")
    header, data = rows[0], rows[1:]
    if not data:
        raise PlotParseError(f"{path} 没有数据行")
    for lineno, row in enumerate(data, start=2):
        if len(row) != len(header):
            raise PlotParseError(f"{path} 第 {lineno} 行列数 {len(row)} 与表头 {len(header)} 不一致")

    x_name = next((c for c in X_COLUMNS if c in header), header[0])
    xi = header.index(x_name)
    xs = []
    for lineno, row in enumerate(data, start=2):
        x = _to_float(row[xi])
        if x is None:
            raise PlotParseError(f"{path} 第 {lineno} 行横轴值无效: {row[xi]!r}")
        xs.append(x)
    log_x = x_name == 'cap' and all(x > 0 for x in xs)

    plot = PlotData(x_name, log_x)
    for ci, name in enumerate(header):
        if ci == xi:
            continue
        cells = [row[ci].strip() for row in data]
        if any(c and _to_float(c) is None for c in cells):
            continue
        points = [(x, _to_float(c)) for x, c in zip(xs, cells) if c and _to_float(c) is not None]
        if points:
            plot.series[name] = sorted(points, key=lambda p: p[0])
    if not plot.series:
        raise PlotParseError(f"{path} 没有数值列")
    return plot


def render_svg(plot: PlotData, title: str = '') -> str:
    """每个序列一个面板，共享横轴"""
    names = list(plot.series)
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig, axes = plt.subplots(len(names), 1, sharex=True, squeeze=False,
                                 figsize=(FIG_WIDTH, PANEL_HEIGHT * len(names) + 0.8))
        try:
            for i, (ax, name) in enumerate(zip(axes[:, 0], names)):
                xs, ys = zip(*plot.series[name])
                ax.plot(xs, ys, marker='o', markersize=3, color=f"C{i}", label=name)
                ax.set_title(name, fontsize=10)
                ax.grid(True, alpha=0.3)
                if plot.log_x:
                    ax.set_xscale('log')
            axes[-1, 0].set_xlabel(f"{plot.x_name} (log)" if plot.log_x else plot.x_name)
            if title:
                fig.suptitle(title)
            fig.tight_layout()
            buffer = io.StringIO()
            fig.savefig(buffer, format='svg', metadata={'Date': None})
        finally:
            plt.close(fig)
    return buffer.getvalue()


def emit_plots(csv_path, out_path, title: Optional[str] = None) -> Path:
    """读取 CSV 并写出 SVG"""
    plot = read_plot_csv(csv_path)
    out_path = Path(out_path)
    atomic_write_text(out_path, render_svg(plot, title if title is not None else Path(csv_path).stem))
    return out_path
