import numpy as np
import pytest

from config import CORRUPTION_HEADER, MANIFEST_NAME, SWEEP_HEADER, SynthConfig, TrainConfig
from errors import (ColmapFormatError, EmptyCloudError, ManifestError, MissingImageError,
                    PlotParseError, PreconditionError, SceneValidationError, UnsupportedCameraError)
from file_handler import FileHandler, save_png
from geometry import CameraIntrinsics, CameraView, Pose, look_at
from harness import (CorruptionRecord, SceneEntry, SceneManifest, corrupt_with_noise,
                     corrupt_with_patches, emit_plots, evaluate_cloud, import_colmap,
                     initialize_from_views, joint_initialize, load_scene, read_corruption_csv,
                     read_plot_csv, run_sweep, score_filter, synth_scene, write_scene,
                     write_sweep_csv)
from harness.synth import generated_azimuths, train_azimuths
from splat import GaussianCloud, psnr, render
from vgnc import TrainingViews

QUANT = 0.5 / 255 + 1e-9


def small_manifest(roles=('train', 'train', 'test', 'generated')):
    k = CameraIntrinsics(20.0, 21.0, 7.5, 5.5, 16, 12)
    entries = []
    for i, role in enumerate(roles):
        pose = look_at([np.sin(0.3 * i), 0.1 * i, -3.0], [0.0, 0.0, 0.0])
        entries.append(SceneEntry(role, f"images/{role}_{i}.png", pose))
    return SceneManifest(k, entries)


def poses_close(a: Pose, b: Pose, tol=1e-9):
    return np.allclose(a.rotation, b.rotation, atol=tol) and np.allclose(a.translation, b.translation, atol=tol)


@pytest.fixture(scope='module')
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp('synth')
    config = SynthConfig(gaussian_count=300, width=64, height=64, focal=64.0, n_train=3, n_test=2,
                         n_generated=4, arc_degrees=20.0, seed=7)
    result = synth_scene(config, root)
    return root, config, result


class TestScene:
    def test_round_trip(self, rng, tmp_path):
        manifest = small_manifest()
        images = [rng.random((12, 16, 3)) for _ in manifest.entries]
        path = write_scene(manifest, images, tmp_path)
        assert path == tmp_path / MANIFEST_NAME
        scene = load_scene(tmp_path)
        assert scene.intrinsics == manifest.intrinsics
        assert [e.path for e in scene.manifest.entries] == [e.path for e in manifest.entries]
        for a, b in zip(scene.manifest.entries, manifest.entries):
            assert a.role == b.role
            assert poses_close(a.pose, b.pose)
        for loaded, original in zip(scene.images, images):
            np.testing.assert_allclose(loaded, original, atol=QUANT)

    def test_roles_partitioned(self, rng, tmp_path):
        manifest = small_manifest()
        write_scene(manifest, [rng.random((12, 16, 3)) for _ in manifest.entries], tmp_path)
        scene = load_scene(tmp_path / MANIFEST_NAME)
        assert len(scene.views('train')) == 2
        assert len(scene.views('test')) == 1
        views = scene.training_views([0])
        assert len(views.validation) == 1
        with pytest.raises(PreconditionError):
            scene.training_views([3])

    def test_requires_train(self, rng, tmp_path):
        manifest = small_manifest(('test', 'generated'))
        with pytest.raises(SceneValidationError):
            write_scene(manifest, [rng.random((12, 16, 3))] * 2, tmp_path)
        (tmp_path / MANIFEST_NAME).write_text(manifest.to_text(), encoding='utf-8')
        with pytest.raises(SceneValidationError):
            load_scene(tmp_path)

    def test_missing_image(self, rng, tmp_path):
        manifest = small_manifest()
        write_scene(manifest, [rng.random((12, 16, 3)) for _ in manifest.entries], tmp_path)
        (tmp_path / 'images' / 'test_2.png').unlink()
        with pytest.raises(MissingImageError) as info:
            load_scene(tmp_path)
        assert info.value.path.endswith('test_2.png')

    def test_shape_mismatch(self, rng, tmp_path):
        manifest = small_manifest(('train',))
        write_scene(manifest, [rng.random((12, 16, 3))], tmp_path)
        save_png(tmp_path / 'images' / 'train_0.png', rng.random((10, 16, 3)))
        with pytest.raises(SceneValidationError):
            load_scene(tmp_path)

    @pytest.mark.parametrize('text, line', [
        ("VGNC-SCENE 2\nK 1 1 0 0 4 4\n", 1),
        ("VGNC-SCENE 1\nK 1 1 0 0 4\n", 2),
        ("VGNC-SCENE 1\nK 1 1 0 0 4 4\nV train a.png 1 0 0 0 0 0\n", 3),
        ("VGNC-SCENE 1\nK 1 1 0 0 4 4\n# comment\nV train a.png 1 0 0 0 0 0 x\n", 4),
        ("VGNC-SCENE 1\nK 1 1 0 0 4 4\nV depth a.png 1 0 0 0 0 0 0\n", 3),
    ])
    def test_parse_errors_carry_line(self, text, line):
        with pytest.raises(ManifestError) as info:
            SceneManifest.parse(text)
        assert info.value.line == line

    def test_duplicate_paths(self):
        manifest = small_manifest()
        manifest.entries.append(manifest.entries[0])
        with pytest.raises(SceneValidationError):
            manifest.validate()


class TestColmap:
    CAMERAS = "# Camera list\n1 PINHOLE 640 480 500.0 510.0 320.0 240.0\n"
    IMAGES = ("# Image list\n"
              "1 1.0 0.0 0.0 0.0 0.1 0.2 0.3 1 b.png\n"
              "10.0 20.0 -1\n"
              "2 0.7071067811865476 0.0 0.7071067811865476 0.0 -1.0 0.0 2.0 1 a.png\n"
              "\n")

    def write(self, tmp_path, cameras, images):
        cam, img = tmp_path / 'cameras.txt', tmp_path / 'images.txt'
        cam.write_text(cameras, encoding='utf-8')
        img.write_text(images, encoding='utf-8')
        return cam, img

    def test_import(self, tmp_path):
        manifest = import_colmap(*self.write(tmp_path, self.CAMERAS, self.IMAGES))
        k = manifest.intrinsics
        assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (500.0, 510.0, 319.5, 239.5, 640, 480)
        assert [e.path for e in manifest.entries] == ['images/a.png', 'images/b.png']
        a, b = manifest.entries
        np.testing.assert_allclose(b.pose.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_array_equal(b.pose.translation, [0.1, 0.2, 0.3])
        expected = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
        np.testing.assert_allclose(a.pose.rotation, expected, atol=1e-12)
        np.testing.assert_array_equal(a.pose.translation, [-1.0, 0.0, 2.0])
        assert {e.role for e in manifest.entries} == {'train'}

    def test_negative_w_quaternion(self, tmp_path):
        positive = "2 0.7071067811865476 0.0 0.7071067811865476 0.0 -1.0 0.0 2.0 1 a.png\n\n"
        negative = "2 -0.7071067811865476 0.0 -0.7071067811865476 0.0 -1.0 0.0 2.0 1 a.png\n\n"
        (expected,) = import_colmap(*self.write(tmp_path, self.CAMERAS, positive)).entries
        manifest = import_colmap(*self.write(tmp_path, self.CAMERAS, negative))
        np.testing.assert_allclose(manifest.entries[0].pose.rotation, expected.pose.rotation, atol=1e-12)
        # 清单里四元数统一为 w ≥ 0
        reread = SceneManifest.parse(manifest.to_text()).entries[0]
        assert reread.pose.quaternion[0] > 0
        np.testing.assert_allclose(reread.pose.rotation, expected.pose.rotation, atol=1e-12)

    def test_simple_pinhole_and_holdout(self, tmp_path):
        cameras = "1 SIMPLE_PINHOLE 100 80 90.0 50.0 40.0\n"
        manifest = import_colmap(*self.write(tmp_path, cameras, self.IMAGES), test_every=2)
        assert manifest.intrinsics.fx == manifest.intrinsics.fy == 90.0
        assert [e.role for e in manifest.entries] == ['test', 'train']

    def test_unsupported_model(self, tmp_path):
        cameras = "1 RADIAL 640 480 500.0 320.0 240.0 0.1 0.01\n"
        with pytest.raises(UnsupportedCameraError):
            import_colmap(*self.write(tmp_path, cameras, self.IMAGES))

    def test_multiple_cameras(self, tmp_path):
        cameras = self.CAMERAS + "2 PINHOLE 320 240 250.0 250.0 160.0 120.0\n"
        with pytest.raises(ColmapFormatError):
            import_colmap(*self.write(tmp_path, cameras, self.IMAGES))

    def test_malformed_line(self, tmp_path):
        with pytest.raises(ColmapFormatError):
            import_colmap(*self.write(tmp_path, self.CAMERAS, "1 1.0 0.0 0.0 0.0 0.1 0.2 1 a.png\n"))

    def test_empty_images(self, tmp_path):
        manifest = import_colmap(*self.write(tmp_path, self.CAMERAS, "# nothing\n"))
        assert manifest.entries == []
        with pytest.raises(SceneValidationError):
            manifest.validate()


class TestSynth:
    def test_deterministic(self, tmp_path):
        config = SynthConfig(gaussian_count=30, width=20, height=20, focal=20.0, n_train=2, n_test=1,
                             n_generated=3, corrupt_fraction=1.0, seed=11)
        synth_scene(config, tmp_path / 'a')
        synth_scene(config, tmp_path / 'b')
        files_a = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*') if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / 'b') for p in (tmp_path / 'b').rglob('*') if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert FileHandler.get_file_hash(tmp_path / 'a' / rel) == FileHandler.get_file_hash(tmp_path / 'b' / rel)

    def test_clean_generated_views(self, synth_dir):
        root, config, result = synth_dir
        scene = load_scene(root)
        for image, view in scene.views('generated'):
            np.testing.assert_allclose(image, render(result.ground_truth, view, config.background), atol=QUANT)
        records = read_corruption_csv(root / 'corruption.csv')
        assert [r.kind for r in records] == ['clean'] * 4
        assert (root / 'corruption.csv').read_text(encoding='utf-8').splitlines()[0] == ','.join(CORRUPTION_HEADER)

    def test_generated_poses_between_train(self):
        config = SynthConfig(n_train=3, n_generated=5, arc_degrees=60.0)
        train = train_azimuths(config)
        gen = generated_azimuths(config)
        assert np.all((gen > train.min()) & (gen < train.max()))
        assert not np.isin(gen, train).any()
        assert len(gen) == 5

    def test_heavy_noise(self, rng, synth_dir):
        _, _, result = synth_dir
        scene_view = CameraView(result.manifest.intrinsics, result.manifest.entries[0].pose)
        clean = render(result.ground_truth, scene_view)
        assert psnr(corrupt_with_noise(clean, 0.5, rng), clean) < 15.0

    def test_patches_cover_fraction(self, rng):
        image = np.zeros((40, 40, 3))
        out = corrupt_with_patches(image, 0.3, rng)
        assert (np.abs(out - image).max(axis=2) > 0).mean() >= 0.3 - 0.01
        np.testing.assert_array_equal(corrupt_with_patches(image, 0.0, rng), image)

    def test_explicit_corruption_plan(self, tmp_path):
        config = SynthConfig(gaussian_count=20, width=16, height=16, focal=16.0, n_train=2, n_test=1,
                             n_generated=2, seed=1)
        plan = [CorruptionRecord(0, 'clean'), CorruptionRecord(1, 'noise', noise_sigma=0.2)]
        result = synth_scene(config, tmp_path, plan)
        assert read_corruption_csv(tmp_path / 'corruption.csv') == plan
        with pytest.raises(PreconditionError):
            synth_scene(config, tmp_path / 'bad', plan[:1])
        assert result.corruption == plan


class TestInitializer:
    def test_needs_two_views(self, synth_dir):
        root, _, _ = synth_dir
        scene = load_scene(root)
        with pytest.raises(PreconditionError):
            initialize_from_views(scene.views('train')[:1])

    def test_joint_adds_points(self, synth_dir):
        root, _, _ = synth_dir
        scene = load_scene(root)
        train_only = joint_initialize(scene, ())
        joint = joint_initialize(scene, [0, 1, 2, 3])
        assert train_only.count > 0
        assert joint.count >= train_only.count
        np.testing.assert_allclose(joint.opacities, 0.1)
        assert np.all(joint.scales > 0)
        assert np.all((joint.colors >= 0) & (joint.colors <= 1))

    def test_parallel_rays_give_empty_cloud(self, synth_dir):
        root, _, _ = synth_dir
        scene = load_scene(root)
        image, view = scene.views('train')[0]
        shifted = Pose(view.pose.rotation, view.pose.translation + np.array([0.5, 0.0, 0.0]))
        with pytest.raises(EmptyCloudError):
            initialize_from_views([(image, view), (image, CameraView(view.intrinsics, shifted))])


class TestSweepAndPlots:
    @pytest.fixture
    def tiny_views(self, rng):
        k = CameraIntrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)
        truth = GaussianCloud.isotropic(rng.uniform(-0.5, 0.5, (10, 3)), np.full(10, 0.2), 0.8,
                                        rng.uniform(0.1, 0.9, (10, 3)))
        samples = [(render(truth, CameraView(k, look_at([x, 0.0, -4.0], [0.0, 0.0, 0.0]))),
                    CameraView(k, look_at([x, 0.0, -4.0], [0.0, 0.0, 0.0]))) for x in (-1.0, 0.0, 1.0, 0.5)]
        views = TrainingViews(samples[:2], samples[2:3], samples[3:])
        return views, truth.take(np.arange(6)).copy()

    def test_sweep_rows(self, tiny_views, tmp_path):
        views, cloud = tiny_views
        config = TrainConfig(total_iterations=20, densify_until=10, densify_interval=5, validation_interval=5,
                             grad_threshold=0.0, progress_bar=False)
        done = []
        entries = run_sweep(views, cloud, [4, 8, 8], config, workers=2, on_entry_done=done.append,
                            out=FileHandler(tmp_path / 'entries'))
        assert [e.cap for e in entries] == [4, 8, 8]
        assert len(done) == 3
        assert entries[1] == entries[2]
        assert all(e.num_gaussians <= e.cap for e in entries)
        path = write_sweep_csv(entries, FileHandler(tmp_path), 'sweep.csv')
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == ','.join(SWEEP_HEADER)
        assert len(lines) == 4
        assert (tmp_path / 'entries' / 'entry_00_cap_4' / 'trace.csv').exists()

    def test_sweep_requires_caps(self, tiny_views):
        views, cloud = tiny_views
        with pytest.raises(PreconditionError):
            run_sweep(views, cloud, [])

    def write_sweep_csv_text(self, path):
        rows = ["cap,num_gaussians,train_psnr,test_psnr,test_ssim,monitor"]
        for i, cap in enumerate((100, 300, 1000, 3000, 10000)):
            rows.append(f"{cap},{cap - 3},{20 + i},{22 - abs(i - 2)},{0.5 + 0.05 * i},{0.01 * (1 + abs(i - 2))}")
        path.write_text('\n'.join(rows) + '\n', encoding='utf-8')
        return path

    def test_svg_series(self, tmp_path):
        csv_path = self.write_sweep_csv_text(tmp_path / 'sweep.csv')
        out = emit_plots(csv_path, tmp_path / 'sweep.svg', title='cap sweep')
        assert out.exists()
        svg = out.read_text(encoding='utf-8')
        assert '<svg' in svg
        for name in ('num_gaussians', 'train_psnr', 'test_psnr', 'test_ssim', 'monitor', 'cap (log)', 'cap sweep'):
            assert name in svg

    def test_svg_deterministic(self, tmp_path):
        csv_path = self.write_sweep_csv_text(tmp_path / 'sweep.csv')
        first = emit_plots(csv_path, tmp_path / 'a.svg').read_bytes()
        second = emit_plots(csv_path, tmp_path / 'b.svg').read_bytes()
        assert first == second

    def test_trace_csv_skips_text_columns(self, tmp_path):
        path = tmp_path / 'trace.csv'
        path.write_text("iter,num_gaussians,cap,monitor,train_psnr,test_psnr,phase\n"
                        "100,10,,0.5,20.0,,grow\n200,12,,0.4,21.0,,refine\n", encoding='utf-8')
        plot = read_plot_csv(path)
        assert plot.x_name == 'iter'
        assert not plot.log_x
        assert list(plot.series) == ['num_gaussians', 'monitor', 'train_psnr']

    @pytest.mark.parametrize('text', ["cap,monitor\n", "", "cap,monitor\n1,0.5,7\n", "cap,monitor\nx,0.5\n"])
    def test_malformed_csv(self, tmp_path, text):
        path = tmp_path / 'bad.csv'
        path.write_text(text, encoding='utf-8')
        with pytest.raises(PlotParseError):
            emit_plots(path, tmp_path / 'bad.svg')


class TestEvaluation:
    def test_perfect_render(self, rng):
        k = CameraIntrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)
        cloud = GaussianCloud.isotropic(rng.uniform(-0.5, 0.5, (5, 3)), np.full(5, 0.2), 0.8,
                                        rng.uniform(0.1, 0.9, (5, 3)))
        view = CameraView(k, look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0]))
        summary = evaluate_cloud(cloud, [(render(cloud, view), view)], ['v'])
        assert summary.mean_psnr == 120.0
        assert summary.mean_ssim == pytest.approx(1.0)
        assert summary.gaussian_count == 5
        assert 'views' not in summary.as_dict()

    def test_score_filter(self):
        corruption = [CorruptionRecord(0, 'clean'), CorruptionRecord(1, 'noise', noise_sigma=0.05),
                      CorruptionRecord(2, 'patch', patch_fraction=0.3), CorruptionRecord(3, 'noise', noise_sigma=0.5)]
        score = score_filter([0, 1, 2], corruption)
        assert score['precision'] == pytest.approx(2 / 3)
        assert score['recall'] == 1.0
        assert score['rejection'] == 0.5
