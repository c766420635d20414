"""场景清单与场景读写模块

清单为逐行文本：
    VGNC-SCENE 1
    K fx fy cx cy width height
    V <role> <relpath> qw qx qy qz tx ty tz
位姿为世界到相机，四元数为 Hamilton (w,x,y,z)。
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import MANIFEST_MAGIC, MANIFEST_NAME, MANIFEST_VERSION, SCENE_ROLES
from errors import ManifestError, MissingImageError, PreconditionError, SceneValidationError
from file_handler import atomic_write_text, load_png, save_png
from geometry.camera import CameraIntrinsics, CameraView, Pose
from vgnc.monitor import ViewSample
from vgnc.trainer import TrainingViews

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneEntry:
    """清单中的一幅图像"""
    role: str
    path: str
    pose: Pose


@dataclass
class SceneManifest:
    """场景清单"""
    intrinsics: CameraIntrinsics
    entries: List[SceneEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def entries_for(self, role: str) -> List[SceneEntry]:
        return [e for e in self.entries if e.role == role]

    def validate(self):
        """路径唯一、角色合法、至少一个训练视图"""
        seen = set()
        for entry in self.entries:
            if entry.role not in SCENE_ROLES:
                raise SceneValidationError(f"未知角色: {entry.role}")
            if not entry.path or any(c.isspace() for c in entry.path):
                raise SceneValidationError(f"图像路径为空或含空白字符: {entry.path!r}")
            if entry.path in seen:
                raise SceneValidationError(f"图像路径重复: {entry.path}")
            seen.add(entry.path)
        if not self.entries_for('train'):
            raise SceneValidationError("清单中没有训练视图")

    # ==================== 文本格式 ====================

    def to_text(self) -> str:
        k = self.intrinsics
        lines = [f"{MANIFEST_MAGIC} {self.version}",
                 ' '.join(['K'] + [repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy)]
                          + [str(k.width), str(k.height)])]
        for e in self.entries:
            values = list(e.pose.quaternion) + list(e.pose.translation)
            lines.append(' '.join(['V', e.role, e.path] + [repr(float(v)) for v in values]))
        return '\n'.join(lines) + '\n'

    @classmethod
    def parse(cls, text: str) -> 'SceneManifest':
        lines = [(i, raw.strip()) for i, raw in enumerate(text.splitlines(), start=1)]
        lines = [(i, line) for i, line in lines if line and not line.startswith('#')]
        if not lines:
            raise ManifestError("清单为空", 1)

        lineno, header = lines[0]
        parts = header.split()
        if len(parts) != 2 or parts[0] != MANIFEST_MAGIC:
            raise ManifestError(f"缺少 {MANIFEST_MAGIC} 标识: {header}", lineno)
        try:
            version = int(parts[1])
        except ValueError:
            raise ManifestError(f"版本号无效: {parts[1]}", lineno) from None
        if version != MANIFEST_VERSION:
            raise ManifestError(f"不支持的版本: {version}", lineno)

        if len(lines) < 2:
            raise ManifestError("缺少内参行", lineno + 1)
        lineno, k_line = lines[1]
        parts = k_line.split()
        if len(parts) != 7 or parts[0] != 'K':
            raise ManifestError(f"内参行格式应为 'K fx fy cx cy width height': {k_line}", lineno)
        try:
            fx, fy, cx, cy = (float(v) for v in parts[1:5])
            intrinsics = CameraIntrinsics(fx, fy, cx, cy, int(parts[5]), int(parts[6]))
        except ValueError as e:
            raise ManifestError(f"内参无效: {e}", lineno) from None

        entries = []
        for lineno, line in lines[2:]:
            parts = line.split()
            if len(parts) != 10 or parts[0] != 'V':
                raise ManifestError(f"视图行格式应为 'V role path qw qx qy qz tx ty tz': {line}", lineno)
            role, path = parts[1], parts[2]
            if role not in SCENE_ROLES:
                raise ManifestError(f"未知角色: {role}", lineno)
            try:
                values = np.array([float(v) for v in parts[3:]])
                q = values[:4]
                norm = np.linalg.norm(q)
                if not np.isfinite(norm) or norm < 1e-12:
                    raise ValueError("四元数为零")
                pose = Pose.from_quaternion(q / norm, values[4:])
            except ValueError as e:
                raise ManifestError(f"位姿无效: {e}", lineno) from None
            entries.append(SceneEntry(role, path, pose))
        return cls(intrinsics, entries, version)


def read_manifest(path) -> SceneManifest:
    with open(path, 'r', encoding='utf-8') as f:
        return SceneManifest.parse(f.read())


def write_manifest(manifest: SceneManifest, path) -> Path:
    path = Path(path)
    atomic_write_text(path, manifest.to_text())
    return path


# ==================== 场景 ====================

@dataclass
class Scene:
    """已加载的场景：清单 + 与条目一一对应的图像"""
    root: Path
    manifest: SceneManifest
    images: List[np.ndarray]

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.manifest.intrinsics

    def indices(self, role: str) -> List[int]:
        return [i for i, e in enumerate(self.manifest.entries) if e.role == role]

    def views(self, role: str) -> List[ViewSample]:
        """某一角色的 (图像, 视图) 列表，保持清单顺序"""
        k = self.intrinsics
        return [(self.images[i], CameraView(k, self.manifest.entries[i].pose)) for i in self.indices(role)]

    def images_for(self, role: str) -> List[np.ndarray]:
        return [self.images[i] for i in self.indices(role)]

    def training_views(self, kept_generated: Optional[Sequence[int]] = None) -> TrainingViews:
        """
        训练 / 验证 / 测试划分

        Args:
            kept_generated: 筛选保留的生成视图下标（按生成视图顺序编号），None 表示全部
        """
        generated = self.views('generated')
        if kept_generated is None:
            validation = generated
        else:
            bad = [j for j in kept_generated if not 0 <= j < len(generated)]
            if bad:
                raise PreconditionError(f"生成视图下标越界: {bad}")
            validation = [generated[j] for j in kept_generated]
        return TrainingViews(self.views('train'), validation, self.views('test'))


def load_scene(path) -> Scene:
    """读取清单（文件或其所在目录）并加载全部图像"""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"清单不存在: {manifest_path}")
    manifest = read_manifest(manifest_path)
    manifest.validate()
    root = manifest_path.parent
    expected = manifest.intrinsics.shape
    images = []
    for entry in manifest.entries:
        image_path = root / entry.path
        if not image_path.exists():
            raise MissingImageError(image_path)
        image = load_png(image_path)
        if image.shape[:2] != expected:
            raise SceneValidationError(
                f"图像 {entry.path} 尺寸 {image.shape[:2]} 与内参 {expected} 不一致")
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        images.append(image)
    counts: Dict[str, int] = {role: len(manifest.entries_for(role)) for role in SCENE_ROLES}
    logger.info(f"加载场景 {manifest_path}: " + ', '.join(f"{r} {n}" for r, n in counts.items()))
    return Scene(root, manifest, images)


def write_scene(manifest: SceneManifest, images: Sequence[np.ndarray], root) -> Path:
    """写出图像与清单，返回清单路径"""
    manifest.validate()
    if len(images) != len(manifest.entries):
        raise SceneValidationError(f"图像数量 {len(images)} 与条目数量 {len(manifest.entries)} 不一致")
    root = Path(root)
    expected = manifest.intrinsics.shape
    for entry, image in zip(manifest.entries, images):
        if np.shape(image)[:2] != expected:
            raise SceneValidationError(
                f"图像 {entry.path} 尺寸 {np.shape(image)[:2]} 与内参 {expected} 不一致")
        target = root / entry.path
        target.parent.mkdir(parents=True, exist_ok=True)
        save_png(target, image)
    return write_manifest(manifest, root / MANIFEST_NAME)
