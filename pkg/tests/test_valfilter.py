import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from config import REPORT_HEADER, FilterConfig, RansacConfig
from errors import EstimationFailedError, PreconditionError, ShapeError
from features import Feature, estimate_rotation_ransac, match_descriptors
from file_handler import FileHandler
from geometry import CameraIntrinsics, CameraView, Pose, project_points
from valfilter import (ConfidenceMap, confidence_map, estimate_pair_geometry, fill_holes,
                       filter_generated_set, low_confidence_count, read_report_csv, reproject_generated,
                       warp_pixels)


@pytest.fixture
def k64() -> CameraIntrinsics:
    return CameraIntrinsics(64.0, 64.0, 31.5, 31.5, 64, 64)


def color_texture(rng, size=64, blur=1.5):
    img = gaussian_filter(rng.random((size, size, 3)), (blur, blur, 0))
    return (img - img.min()) / (img.max() - img.min())


def features_at(pixels, descriptors):
    return [Feature(position=(float(p[0]), float(p[1])), scale=1.6, orientation=0.0, descriptor=d)
            for p, d in zip(pixels, descriptors)]


def rotation_angle(a, b):
    return Rotation.from_matrix(a @ b.T).magnitude()


class TestReproject:
    def test_identity_pose_is_exact(self, rng):
        k = CameraIntrinsics(25.0, 25.0, 14.5, 9.5, 30, 20)
        img = rng.random((20, 30, 3))
        out, mask = reproject_generated(img, k, Pose.identity())
        assert mask.all()
        np.testing.assert_array_equal(out, img)

    def test_forward_translation_example(self):
        k = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 201, 101)
        target, z = warp_pixels(np.array([[100.0, 50.0]]), k, Pose(np.eye(3), [0.0, 0.0, 1.0]))
        np.testing.assert_allclose(target[0], [75.0, 50.0])
        assert z[0] == pytest.approx(2.0)

    def test_collisions_keep_last_in_scan_order(self, rng):
        k = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 201, 101)
        img = rng.random((101, 201))
        out, mask = reproject_generated(img, k, Pose(np.eye(3), [0.0, 0.0, 2.0]))
        # 源像素列 124..126、行 49..51 都落到 (75, 50)
        assert mask[50, 75]
        assert out[50, 75] == img[51, 126]
        assert out.shape == img.shape

    def test_rotation_about_optical_axis(self, rng):
        k = CameraIntrinsics(20.0, 20.0, 10.0, 10.0, 21, 21)
        img = rng.random((21, 21, 3))
        rot = Rotation.from_euler('z', 90, degrees=True).as_matrix()
        out, mask = reproject_generated(img, k, Pose(rot, np.zeros(3)))
        assert mask.all()
        np.testing.assert_array_equal(out, np.rot90(img, -1))

    def test_behind_camera_discarded(self, rng, k64):
        flip = Rotation.from_euler('y', 180, degrees=True).as_matrix()
        _, mask = reproject_generated(rng.random((64, 64)), k64, Pose(flip, np.zeros(3)))
        assert not mask.any()

    def test_shape_mismatch(self, k64):
        with pytest.raises(ShapeError):
            reproject_generated(np.zeros((32, 64, 3)), k64, Pose.identity())


class TestFillHoles:
    def test_all_valid_unchanged(self, rng):
        img = rng.random((10, 12, 3))
        out, mask = fill_holes(img, np.ones((10, 12), dtype=bool), 2)
        np.testing.assert_array_equal(out, img)
        assert mask.all()

    def test_single_hole_in_constant_image(self):
        img = np.full((9, 9, 3), 0.7)
        mask = np.ones((9, 9), dtype=bool)
        mask[4, 4] = False
        img[4, 4] = 0.0
        out, filled = fill_holes(img, mask, 2)
        assert filled.all()
        np.testing.assert_allclose(out[4, 4], [0.7, 0.7, 0.7])

    def test_large_hole_interior_stays_invalid(self):
        yy, xx = np.mgrid[0:41, 0:41]
        mask = np.hypot(xx - 20, yy - 20) > 10
        _, filled = fill_holes(np.ones((41, 41)), mask, 2)
        assert not filled[20, 20]
        assert not filled[20, 14]
        assert filled[20, 11]

    def test_single_neighbour_is_not_enough(self):
        mask = np.zeros((7, 7), dtype=bool)
        mask[3, 3] = True
        _, filled = fill_holes(np.ones((7, 7)), mask, 2)
        np.testing.assert_array_equal(filled, mask)


class TestConfidence:
    def test_identical(self, rng):
        img = rng.random((6, 7, 3))
        m = confidence_map(img, img, np.ones((6, 7), dtype=bool), 0.25)
        np.testing.assert_array_equal(m.values, np.ones((6, 7)))

    def test_distance_sigma(self):
        a = np.zeros((2, 2, 3))
        b = np.zeros((2, 2, 3))
        b[..., 0] = 0.3
        m = confidence_map(a, b, np.ones((2, 2), dtype=bool), 0.3)
        np.testing.assert_allclose(m.values, np.exp(-1.0))

    def test_worked_example(self):
        i_img = np.array([[0.0, 0.0], [0.5, 1.0]])
        reproj = np.array([[0.0, 0.3], [0.5, 0.4]])
        m = confidence_map(i_img, reproj, np.ones((2, 2), dtype=bool), 0.5)
        np.testing.assert_allclose(m.values, [[1.0, np.exp(-0.36)], [1.0, np.exp(-1.44)]])

    def test_symmetric(self, rng):
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        mask = rng.random((5, 5)) > 0.3
        m1 = confidence_map(a, b, mask, 0.25)
        m2 = confidence_map(b, a, mask, 0.25)
        np.testing.assert_array_equal(m1.values[mask], m2.values[mask])
        assert np.isnan(m1.values[~mask]).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confidence_map(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), dtype=bool), 0.5)

    def test_counts(self):
        values = np.array([[0.2, 0.9], [0.5, 0.6]])
        m = ConfidenceMap(values, np.ones((2, 2), dtype=bool))
        assert low_confidence_count(m, 0.5) == 2
        assert low_confidence_count(m, 1.0) == 4
        assert low_confidence_count(ConfidenceMap(np.ones((3, 3)), np.ones((3, 3), dtype=bool)), 0.5) == 0

    def test_invalid_pixels_count_as_low(self):
        valid = np.array([[True, False], [True, True]])
        m = ConfidenceMap(np.where(valid, 1.0, np.nan), valid)
        assert low_confidence_count(m, 0.5) == 1

    def test_monotone_in_theta_and_sigma(self, rng):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        mask = np.ones((16, 16), dtype=bool)
        counts_theta = [low_confidence_count(confidence_map(a, b, mask, 0.25), t) for t in (0.1, 0.3, 0.5, 0.9)]
        assert counts_theta == sorted(counts_theta)
        counts_sigma = [low_confidence_count(confidence_map(a, b, mask, s), 0.5) for s in (0.1, 0.3, 1.0, 3.0)]
        assert counts_sigma == sorted(counts_sigma, reverse=True)


class TestPairGeometry:
    def _fixture(self, rng, k, n=60, translation=(0.6, 0.1, 0.05)):
        rotation = Rotation.from_rotvec(rng.normal(scale=0.05, size=3)).as_matrix()
        rel = Pose(rotation, np.array(translation))
        pts = np.column_stack([rng.uniform(-2, 2, 6 * n), rng.uniform(-2, 2, 6 * n), rng.uniform(4, 8, 6 * n)])
        pa, za = project_points(pts, CameraView(k, Pose.identity()))
        pb, zb = project_points(pts, CameraView(k, rel))
        keep = np.flatnonzero((za > 0) & (zb > 0) & k.contains(pa) & k.contains(pb))[:n]
        desc = rng.normal(size=(len(keep), 128))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        return rel, za[keep], features_at(pa[keep], desc), features_at(pb[keep], desc)

    def test_default_warp_is_unit_translation(self, rng):
        k = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
        rel, _, fa, fb = self._fixture(rng, k)
        assert FilterConfig().warp_depth == 'unit'
        geometry = estimate_pair_geometry(fa, fb, k)
        assert geometry.model == 'essential'
        assert geometry.inliers == len(fa)
        assert rotation_angle(geometry.pose.rotation, rel.rotation) < 1e-6
        assert np.linalg.norm(geometry.pose.translation) == pytest.approx(1.0)
        expected = rel.translation / np.linalg.norm(rel.translation)
        np.testing.assert_allclose(geometry.pose.translation, expected, atol=1e-6)

    def test_essential_with_median_depth(self, rng):
        k = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
        rel, depth_a, fa, fb = self._fixture(rng, k)
        geometry = estimate_pair_geometry(fa, fb, k, FilterConfig(warp_depth='median'))
        assert geometry.model == 'essential'
        assert rotation_angle(geometry.pose.rotation, rel.rotation) < 1e-6
        np.testing.assert_allclose(geometry.pose.translation, rel.translation / np.median(depth_a), atol=1e-6)

    def test_small_parallax_uses_rotation(self, rng):
        # 平移 0.05、深度 4..8：视差 2~4 像素，扣除旋转后残差约 ±1 像素；
        # 收紧的内点阈值让纯旋转 RANSAC 失败，只剩残差视差规则
        k = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
        rel, _, fa, fb = self._fixture(rng, k, translation=(0.05, 0.0, 0.0))
        tight = RansacConfig(sampson_threshold=0.05)
        with pytest.raises(EstimationFailedError):
            estimate_rotation_ransac(match_descriptors(fa, fb), k, tight)

        geometry = estimate_pair_geometry(fa, fb, k, ransac_config=tight)
        assert geometry.model == 'rotation'
        assert not geometry.pose.translation.any()
        assert rotation_angle(geometry.pose.rotation, rel.rotation) < 0.02
        assert 0 < geometry.inliers <= len(fa)

        strict = FilterConfig(max_rotation_parallax=0.1)
        geometry = estimate_pair_geometry(fa, fb, k, strict, ransac_config=tight)
        assert geometry.model == 'essential'
        assert np.linalg.norm(geometry.pose.translation) == pytest.approx(1.0)

    def test_zero_parallax_prefers_rotation(self, rng):
        k = CameraIntrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
        pixels = np.column_stack([rng.uniform(0, 319, 40), rng.uniform(0, 239, 40)])
        desc = rng.normal(size=(40, 128))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        geometry = estimate_pair_geometry(features_at(pixels, desc), features_at(pixels, desc), k)
        assert geometry.model == 'rotation'
        assert rotation_angle(geometry.pose.rotation, np.eye(3)) < 1e-6
        assert not geometry.pose.translation.any()

    def test_no_matches_fails(self, k64):
        geometry = estimate_pair_geometry([], [], k64)
        assert geometry.model == 'failed'
        assert not geometry.ok


class TestFilterSet:
    def test_requires_inputs(self, k64):
        with pytest.raises(PreconditionError):
            filter_generated_set([], [np.zeros((64, 64, 3))], k64)

    def test_empty_generated(self, rng, k64):
        kept, report = filter_generated_set([color_texture(rng)], [], k64)
        assert kept == []
        assert report.entries == []
        assert report.tau == pytest.approx(0.1 * 64 * 64)

    def test_copy_kept_noise_dropped(self, rng, k64):
        img = color_texture(rng)
        calls = []
        kept, report = filter_generated_set([img], [img.copy(), rng.random((64, 64, 3))], k64,
                                            on_pair_done=lambda j, i, n: calls.append((j, i, n)))
        assert kept == [0]
        assert report.entries[0].closest_input == 0
        assert report.entries[0].n_min <= report.tau
        assert report.entries[1].n_min > report.tau
        assert sorted((j, i) for j, i, _ in calls) == [(0, 0), (1, 0)]

    def test_tau_monotone(self, rng, k64):
        inputs = [color_texture(rng), color_texture(rng)]
        generated = [inputs[1].copy(), rng.random((64, 64, 3)), np.clip(inputs[0] + 0.2, 0, 1)]
        previous = set()
        for tau in (0.0, 0.1, 0.5, 1.0):
            kept, _ = filter_generated_set(inputs, generated, k64, FilterConfig(tau_fraction=tau))
            assert previous <= set(kept)
            previous = set(kept)
        assert previous == {0, 1, 2}

    def test_workers_do_not_change_report(self, rng, k64):
        inputs = [color_texture(rng), color_texture(rng)]
        generated = [inputs[0].copy(), rng.random((64, 64, 3)), inputs[1].copy()]
        _, serial = filter_generated_set(inputs, generated, k64, workers=1)
        _, threaded = filter_generated_set(inputs, generated, k64, workers=3)
        assert serial.to_csv_rows() == threaded.to_csv_rows()
        assert serial.entries[2].closest_input == 1

    def test_report_csv(self, rng, k64, tmp_path):
        img = color_texture(rng)
        _, report = filter_generated_set([img], [img.copy()], k64)
        handler = FileHandler(tmp_path)
        path = handler.write_csv('report.csv', REPORT_HEADER, report.to_csv_rows())
        assert path.read_text(encoding='utf-8').splitlines()[0] == 'gen_index,closest_input,n_min,n_total,kept'
        entries = read_report_csv(path)
        assert [(e.gen_index, e.n_total, e.kept) for e in entries] == [(0, 64 * 64, True)]
