import shutil

import numpy as np
import pytest

from config import TrainConfig
from errors import AlignmentError, CheckpointError, PreconditionError, ShapeError
from geometry import CameraIntrinsics, CameraView, look_at
from splat import CloudGradients, GaussianCloud, render
from vgnc import (Adam, CheckpointManager, DensifyStats, MonitorRecord, MonitorTrace, Phase,
                  TrainingViews, VgncTrainer, densify_and_prune, detect_overfit, expon_lr,
                  gaussian_dropout, optimizer_step, pooled_psnr, scene_extent, training_loss,
                  validation_monitor, vgnc_train)
from vgnc.optimizer import create_optimizer


def ring_views(k, count, radius=4.0, offset=0.0):
    views = []
    for i in range(count):
        angle = offset + i * 2.0 * np.pi / max(count, 1) * 0.25
        eye = np.array([radius * np.sin(angle), -0.5, -radius * np.cos(angle)])
        views.append(CameraView(k, look_at(eye, np.zeros(3))))
    return views


def random_cloud(rng, n, spread=0.6, scale=0.15, opacity=0.8):
    means = rng.uniform(-spread, spread, (n, 3))
    return GaussianCloud.isotropic(means, np.full(n, scale), opacity, rng.uniform(0.1, 0.9, (n, 3)))


@pytest.fixture
def small_scene(rng):
    k = CameraIntrinsics(24.0, 24.0, 11.5, 11.5, 24, 24)
    truth = random_cloud(rng, 20)
    train = [(render(truth, v), v) for v in ring_views(k, 3)]
    validation = [(render(truth, v), v) for v in ring_views(k, 2, offset=0.2)]
    test = [(render(truth, v), v) for v in ring_views(k, 2, offset=0.35)]
    initial = truth.take(np.arange(12)).copy()
    initial.means += rng.normal(scale=0.05, size=initial.means.shape)
    return TrainingViews(train, validation, test), initial


def quick_config(**overrides):
    params = dict(total_iterations=60, densify_until=30, densify_interval=10, validation_interval=5,
                  grad_threshold=0.0, progress_bar=False, seed=3)
    params.update(overrides)
    return TrainConfig(**params)


def fake_gradients(count, mean2d_grad):
    grads = CloudGradients.zeros(count)
    grads.mean2d_grad_norm = np.asarray(mean2d_grad, dtype=np.float64)
    grads.visible = np.ones(count, dtype=bool)
    grads.touch_count = np.ones(count, dtype=np.int64)
    return grads


def stats_for(count, values):
    stats = DensifyStats.zeros(count)
    stats.add(fake_gradients(count, values))
    return stats


class TestLoss:
    def test_identical(self, rng):
        img = rng.random((12, 12, 3))
        for weight in (0.0, 0.2, 0.9):
            loss, _ = training_loss(img, img, weight)
            assert loss == pytest.approx(0.0, abs=1e-12)

    def test_l1_only(self):
        target = np.full((8, 8, 3), 0.4)
        loss, _ = training_loss(target + 0.1, target, 0.0, 1.0)
        assert loss == pytest.approx(0.1)

    def test_gradient(self, rng):
        rendered, target = rng.random((10, 10, 3)), rng.random((10, 10, 3))
        _, grad = training_loss(rendered, target, 0.2, 1.5)
        h = 1e-6
        numeric = np.zeros_like(rendered)
        for idx in np.ndindex(rendered.shape):
            plus, minus = rendered.copy(), rendered.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (training_loss(plus, target, 0.2, 1.5)[0]
                            - training_loss(minus, target, 0.2, 1.5)[0]) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            training_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestOptimizer:
    def test_zero_gradient_keeps_parameters(self, rng):
        params = {'x': rng.normal(size=(5, 3))}
        before = params['x'].copy()
        adam = Adam(params, {'x': 0.1})
        for _ in range(3):
            adam.step(params, {'x': np.zeros((5, 3))})
        np.testing.assert_array_equal(params['x'], before)

    def test_zero_learning_rate(self, rng):
        params = {'x': rng.normal(size=4)}
        before = params['x'].copy()
        adam = Adam(params, {'x': 0.0})
        adam.step(params, {'x': rng.normal(size=4)})
        np.testing.assert_array_equal(params['x'], before)

    def test_quadratic(self):
        params = {'x': np.array([0.0])}
        adam = Adam(params, {'x': 0.1})
        for _ in range(500):
            adam.step(params, {'x': 2.0 * (params['x'] - 3.0)})
        assert abs(params['x'][0] - 3.0) < 1e-3

    def test_misaligned_state(self, rng):
        cloud = random_cloud(rng, 4)
        adam = create_optimizer(random_cloud(rng, 3), TrainConfig(), 1.0)
        with pytest.raises(AlignmentError):
            optimizer_step(cloud, CloudGradients.zeros(4), adam)

    def test_step_normalizes_and_clips(self, rng):
        cloud = random_cloud(rng, 6)
        adam = create_optimizer(cloud, TrainConfig(color_lr=10.0), 1.0)
        grads = CloudGradients.zeros(6)
        grads.colors = np.full((6, 3), -1.0)
        grads.rotations = rng.normal(size=(6, 4))
        optimizer_step(cloud, grads, adam)
        assert cloud.colors.max() <= 1.0
        np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0)

    def test_row_surgery(self, rng):
        cloud = random_cloud(rng, 5)
        adam = create_optimizer(cloud, TrainConfig(), 1.0)
        adam.extend(3)
        assert adam.rows == 8
        adam.take(np.array([0, 2, 7]))
        assert adam.rows == 3
        assert all(arr.shape[0] == 3 for arr in adam.exp_avg_sq.values())

    def test_expon_lr(self):
        assert expon_lr(1e-2, 1e-4, 0, 100) == pytest.approx(1e-2)
        assert expon_lr(1e-2, 1e-4, 100, 100) == pytest.approx(1e-4)
        assert expon_lr(1e-2, 1e-4, 50, 100) == pytest.approx(1e-3)


class TestDensify:
    def test_stats_count_only_touched(self):
        grads = fake_gradients(3, [1.0, 2.0, 3.0])
        grads.touch_count = np.array([4, 0, 1])
        stats = DensifyStats.zeros(3)
        stats.add(grads)
        stats.add(grads)
        np.testing.assert_array_equal(stats.denom, [2, 0, 2])
        np.testing.assert_allclose(stats.mean_grad(), [1.0, 0.0, 3.0])

    def test_cap_halts_growth(self, rng):
        cloud = random_cloud(rng, 10)
        out = densify_and_prune(cloud, stats_for(10, np.ones(10)), TrainConfig(), cap=10, extent=1.0)
        assert out.count == 10

    def test_clone_small_gaussian(self, rng):
        cloud = random_cloud(rng, 3, scale=0.001)
        values = np.array([0.0, 1.0, 0.0])
        out = densify_and_prune(cloud, stats_for(3, values), TrainConfig(), cap=None, extent=1.0)
        assert out.count == 4
        np.testing.assert_array_equal(out.means[3], cloud.means[1])

    def test_split_large_gaussian(self, rng):
        cloud = random_cloud(rng, 2, scale=0.5)
        adam = create_optimizer(cloud, TrainConfig(), 1.0)
        out = densify_and_prune(cloud, stats_for(2, [1.0, 0.0]), TrainConfig(), cap=None, extent=1.0,
                                optimizer=adam)
        assert out.count == 3
        assert adam.rows == 3
        np.testing.assert_array_equal(out.means[0], cloud.means[1])
        np.testing.assert_allclose(out.scales[1:], 0.5 / 1.6)

    def test_cap_admits_highest_gradients(self, rng):
        cloud = random_cloud(rng, 5, scale=0.001)
        values = np.array([0.1, 0.5, 0.3, 0.9, 0.2])
        out = densify_and_prune(cloud, stats_for(5, values), TrainConfig(), cap=7, extent=1.0)
        assert out.count == 7
        np.testing.assert_array_equal(out.means[5:], cloud.means[[1, 3]])

    def test_prune_transparent(self, rng):
        cloud = random_cloud(rng, 4)
        cloud.opacity_logits[2] = np.log(0.001 / 0.999)
        adam = create_optimizer(cloud, TrainConfig(), 1.0)
        out = densify_and_prune(cloud, DensifyStats.zeros(4), TrainConfig(), cap=None, extent=1.0,
                                optimizer=adam)
        assert out.count == 3
        assert adam.rows == 3
        np.testing.assert_array_equal(out.means, cloud.means[[0, 1, 3]])

    def test_dropout_exact_count(self, rng):
        cloud = random_cloud(rng, 100)
        adam = create_optimizer(cloud, TrainConfig(), 1.0)
        out = gaussian_dropout(cloud, 40, seed=5, optimizer=adam)
        assert out.count == 40
        assert adam.rows == 40
        original = {tuple(m) for m in cloud.means}
        assert all(tuple(m) in original for m in out.means)

    def test_dropout_noop_and_determinism(self, rng):
        cloud = random_cloud(rng, 30)
        assert gaussian_dropout(cloud, 30, seed=1).count == 30
        assert gaussian_dropout(cloud, 50, seed=1).count == 30
        a = gaussian_dropout(cloud, 10, seed=9)
        b = gaussian_dropout(cloud, 10, seed=9)
        np.testing.assert_array_equal(a.means, b.means)

    def test_dropout_rejects_negative(self, rng):
        with pytest.raises(PreconditionError):
            gaussian_dropout(random_cloud(rng, 3), -1, seed=0)

    def test_scene_extent(self):
        k = CameraIntrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)
        views = [CameraView(k, look_at([x, 0.0, -5.0], [x, 0.0, 0.0])) for x in (-1.0, 1.0)]
        assert scene_extent(views) == pytest.approx(1.1)
        assert scene_extent(views[:1]) == 1.0


class TestMonitor:
    def test_exact_renders(self, small_scene):
        views, cloud = small_scene
        validation = [(render(cloud, v), v) for _, v in views.validation]
        assert validation_monitor(cloud, validation) == 0.0

    def test_offset_and_average(self, small_scene):
        views, cloud = small_scene
        view_a, view_b = views.validation[0][1], views.validation[1][1]
        img_a = render(cloud, view_a) + 0.1
        assert validation_monitor(cloud, [(img_a, view_a)]) == pytest.approx(0.01)
        img_b = render(cloud, view_b) + 0.3
        assert validation_monitor(cloud, [(img_a, view_a), (img_b, view_b)]) == pytest.approx(0.05)

    def test_psnr_identity(self, rng, small_scene):
        views, cloud = small_scene
        samples = views.train + views.validation + views.test
        for _ in range(100):
            chosen = rng.choice(len(samples), size=rng.integers(1, len(samples) + 1), replace=False)
            sigma = rng.uniform(0.005, 0.3)
            noisy = [(np.clip(samples[i][0] + rng.normal(scale=sigma, size=samples[i][0].shape), 0, 1),
                      samples[i][1]) for i in chosen]
            m = validation_monitor(cloud, noisy)
            assert abs(-10.0 * np.log10(m) - pooled_psnr(cloud, noisy, (0.0, 0.0, 0.0))) < 1e-9

    def test_empty_validation(self, small_scene):
        _, cloud = small_scene
        with pytest.raises(PreconditionError):
            validation_monitor(cloud, [])

    @pytest.mark.parametrize('values, expected', [
        ([0.5, 0.4, 0.3], False),
        ([0.30, 0.31, 0.32, 0.33], True),
        ([0.30, 0.31, 0.29, 0.31, 0.32], False),
        ([0.30, 0.30, 0.31, 0.32], False),
    ])
    def test_detect_overfit(self, values, expected):
        trace = MonitorTrace()
        for i, m in enumerate(values):
            trace.record(MonitorRecord(100 * (i + 1), 10, None, m, 20.0))
        assert detect_overfit(trace, 3) is expected

    def test_trace_bookkeeping_and_csv(self, tmp_path):
        trace = MonitorTrace()
        for it, count, m in [(100, 10, 0.3), (200, 20, 0.1), (300, 30, 0.2)]:
            trace.record(MonitorRecord(it, count, count + 5, m, 20.0, 18.5 if it > 100 else None, 'grow'))
        assert trace.m_opt == 0.1
        assert trace.num_opt == 20
        with pytest.raises(PreconditionError):
            trace.record(MonitorRecord(300, 5, None, 0.0, 1.0))
        path = trace.to_csv(tmp_path / 'trace.csv')
        assert path.read_text(encoding='utf-8').splitlines()[0] == \
            'iter,num_gaussians,cap,monitor,train_psnr,test_psnr,phase'
        loaded = MonitorTrace.from_csv(path)
        assert loaded.records == trace.records
        assert loaded.num_opt == 20


class TestTrainer:
    def test_requires_validation(self, small_scene):
        views, cloud = small_scene
        with pytest.raises(PreconditionError):
            VgncTrainer(TrainingViews(views.train, []), cloud, quick_config())

    def test_controller_contract(self, small_scene):
        views, cloud = small_scene
        observed = []
        trainer = None

        def on_progress(iteration, total):
            observed.append((trainer.cloud.count, trainer.state.cap, trainer.optimizer.rows,
                             trainer.stats.count, trainer.state.phase))

        trainer = VgncTrainer(views, cloud, quick_config(), on_progress=on_progress)
        final, trace = trainer.run()
        assert len(observed) == 60
        for count, cap, rows, stats_rows, _ in observed:
            assert count <= cap
            assert rows == count == stats_rows
        phases = [phase for *_, phase in observed]
        order = [Phase.GROW, Phase.DROPPED, Phase.REFINE]
        assert [order.index(p) for p in phases] == sorted(order.index(p) for p in phases)
        assert trainer.state.phase == Phase.REFINE
        assert trainer.state.cap == trainer.state.num_opt
        assert final.count <= trainer.state.num_opt
        assert trace.m_opt == min(trace.monitors)
        best = trace.records[int(np.argmin(trace.monitors))]
        assert trace.num_opt == best.gaussian_count
        assert [r.iteration for r in trace.records] == list(range(5, 61, 5))

    def test_seeded_runs_are_identical(self, small_scene):
        views, cloud = small_scene
        a, trace_a = vgnc_train(views, cloud, quick_config())
        b, trace_b = vgnc_train(views, cloud, quick_config())
        for name, arr in a.parameters().items():
            np.testing.assert_array_equal(arr, getattr(b, name))
        assert trace_a.records == trace_b.records

    def test_fixed_cap_without_number_control(self, small_scene):
        views, cloud = small_scene
        records = []
        trainer = VgncTrainer(views, cloud, quick_config(number_control=False, count_cap_initial=15),
                              on_record=records.append)
        final, _ = trainer.run()
        assert {r.cap for r in records} == {15}
        assert all(r.gaussian_count <= 15 for r in records)
        assert {r.phase for r in records} <= {'grow', 'refine'}
        assert final.count <= 15

    def test_initial_cloud_above_cap_is_dropped(self, small_scene):
        views, cloud = small_scene
        trainer = VgncTrainer(views, cloud, quick_config(number_control=False, count_cap_initial=5))
        assert trainer.cloud.count == 5
        assert trainer.optimizer.rows == 5

    def test_rise_detection_ends_grow(self, small_scene, monkeypatch):
        values = iter([0.5, 0.4, 0.41, 0.42, 0.43] + [0.3] * 100)
        monkeypatch.setattr('vgnc.trainer.validation_monitor', lambda *args, **kwargs: next(values))
        views, cloud = small_scene
        trainer = VgncTrainer(views, cloud, quick_config(total_iterations=80, densify_until=50))
        trainer.run()
        assert trainer.state.grow_end == 25
        assert trainer.state.dropped_until == 50
        assert trainer.state.num_opt == trainer.trace.records[1].gaussian_count
        assert trainer.cloud.count <= trainer.state.num_opt

    def test_rise_detection_disabled(self, small_scene, monkeypatch):
        values = iter([0.5, 0.4, 0.41, 0.42, 0.43] + [0.3] * 100)
        monkeypatch.setattr('vgnc.trainer.validation_monitor', lambda *args, **kwargs: next(values))
        views, cloud = small_scene
        trainer = VgncTrainer(views, cloud, quick_config(total_iterations=80, densify_until=50,
                                                         rise_detection=False))
        trainer.run()
        assert trainer.state.grow_end == 50

    def test_refine_early_stop(self, small_scene, monkeypatch):
        monkeypatch.setattr('vgnc.trainer.validation_monitor', lambda *args, **kwargs: 0.2)
        views, cloud = small_scene
        trainer = VgncTrainer(views, cloud, quick_config(refine_early_stop=True, refine_patience=2))
        _, trace = trainer.run()
        assert trainer.stopped_early
        assert trace.records[-1].iteration == 50

    def test_resume_is_bit_identical(self, small_scene, tmp_path):
        views, cloud = small_scene
        config = quick_config(checkpoint_interval=20)
        manager = CheckpointManager(tmp_path / 'ckpt')
        full, full_trace = vgnc_train(views, cloud, config, checkpoints=manager)
        assert [p.name for p in manager.list_checkpoints()] == ['iter_000020', 'iter_000040', 'iter_000060']
        shutil.rmtree(tmp_path / 'ckpt' / 'iter_000060')
        resumed, resumed_trace = vgnc_train(views, cloud, config, checkpoints=manager, resume=True)
        for name, arr in full.parameters().items():
            np.testing.assert_array_equal(arr, getattr(resumed, name))
        assert resumed_trace.records == full_trace.records

    def test_resume_rejects_other_config(self, small_scene, tmp_path):
        views, cloud = small_scene
        manager = CheckpointManager(tmp_path / 'ckpt')
        vgnc_train(views, cloud, quick_config(checkpoint_interval=20), checkpoints=manager)
        with pytest.raises(PreconditionError):
            vgnc_train(views, cloud, quick_config(checkpoint_interval=20, seed=4), checkpoints=manager,
                       resume=True)

    def test_corrupt_checkpoint_state_raises(self, small_scene, tmp_path):
        views, cloud = small_scene
        config = quick_config(checkpoint_interval=20)
        manager = CheckpointManager(tmp_path / 'ckpt')
        vgnc_train(views, cloud, config, checkpoints=manager)
        latest = manager.list_checkpoints()[-1]
        (latest / 'state.json').write_text('{"iteration": 6', encoding='utf-8')
        with pytest.raises(CheckpointError):
            manager.load(latest)
        with pytest.raises(CheckpointError):
            vgnc_train(views, cloud, config, checkpoints=manager, resume=True)
