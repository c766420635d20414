"""异常定义模块

所有异常同时继承对应的内置异常（ValueError / FileNotFoundError），
调用方按内置类型捕获依然有效。
"""
from typing import Optional


class VgncError(Exception):
    """本项目异常基类"""


class ShapeError(VgncError, ValueError):
    """数组形状不匹配"""


class PreconditionError(VgncError, ValueError):
    """前置条件不满足"""


# ==================== 几何 ====================

class PointBehindCameraError(VgncError, ValueError):
    """点位于相机后方"""


class DegenerateBaselineError(VgncError, ValueError):
    """基线过短（纯旋转时本质矩阵为零）"""


class InvalidEssentialError(VgncError, ValueError):
    """矩阵不满足本质矩阵的秩 2 约束"""


class CheiralityError(VgncError, ValueError):
    """四个候选位姿都无法让点落在两相机前方"""


class DegenerateTriangulationError(VgncError, ValueError):
    """射线平行或相机中心重合，无法三角化"""


# ==================== 特征 ====================

class InsufficientCorrespondencesError(VgncError, ValueError):
    """对应点数量不足"""


class EstimationFailedError(VgncError, ValueError):
    """RANSAC 最优模型内点不足"""


# ==================== 训练 ====================

class AlignmentError(VgncError, ValueError):
    """优化器状态与点云行数不一致"""


class EmptyCloudError(VgncError, ValueError):
    """初始化得到空点云"""


# ==================== 场景与文件 ====================

class ManifestError(VgncError, ValueError):
    """场景清单解析错误"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"第 {line} 行: {message}"
        super().__init__(message)


class MissingImageError(VgncError, FileNotFoundError):
    """清单引用的图像不存在"""

    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"图像文件不存在: {self.path}")


class SceneValidationError(VgncError, ValueError):
    """场景内容不合法"""


class UnsupportedCameraError(VgncError, ValueError):
    """不支持的 COLMAP 相机模型"""


class ColmapFormatError(VgncError, ValueError):
    """COLMAP 文本格式错误"""


class PlotParseError(VgncError, ValueError):
    """绘图输入 CSV 无法解析"""


class ConfigError(VgncError, ValueError):
    """配置文件错误"""


class OutputPathError(VgncError, ValueError):
    """输出路径越出指定目录"""


class ReportFormatError(VgncError, ValueError):
    """筛选报告 CSV 格式错误"""


class CheckpointError(VgncError, ValueError):
    """检查点文件损坏或内容不完整"""
