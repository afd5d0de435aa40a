import numpy as np
import pytest

from ktpt.data import GeneratorConfig, SequenceDataset, generate_synthetic, standardize_splits
from ktpt.errors import AlignmentError, ShapeError
from ktpt.layers import AffineLayer, softmax_t
from ktpt.models import Mlp, StackedLstm, snapshot
from ktpt.numerics import Pcg32
from ktpt.pretrain import SoftTargetSet
from ktpt.train import (
    EpochRecord,
    HardLoss,
    History,
    LogitMatchLoss,
    SgdConfig,
    SoftLoss,
    clip_global_norm,
    dataset_logits,
    evaluate_metrics,
    frame_accuracy,
    frame_accuracy_from_logits,
    gradient_variance_diagnostic,
    run_phases,
    run_training,
    segment_error_rate,
    sgd_momentum_step,
)

TINY = GeneratorConfig(n_train=30, n_cv=10, n_test=10, min_length=6, max_length=10)


@pytest.fixture(scope="module")
def splits():
    return standardize_splits(generate_synthetic(TINY))


class TestMomentum:
    def test_hand_computed(self):
        p = [np.array([1.0])]
        v = [np.array([0.0])]
        sgd_momentum_step(p, [np.array([2.0])], v, 0.1, 0.5)
        assert p[0][0] == pytest.approx(0.8) and v[0][0] == pytest.approx(-0.2)
        sgd_momentum_step(p, [np.array([2.0])], v, 0.1, 0.5)
        assert v[0][0] == pytest.approx(-0.3) and p[0][0] == pytest.approx(0.5)

    def test_zero_momentum_is_plain_sgd(self):
        p = [np.array([[1.0, 2.0]])]
        sgd_momentum_step(p, [np.array([[1.0, -1.0]])], [np.zeros((1, 2))], 0.5, 0.0)
        np.testing.assert_array_equal(p[0], [[0.5, 2.5]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)

    def test_quadratic_converges(self):
        p = [np.array([5.0, -3.0])]
        v = [np.zeros(2)]
        for _ in range(300):
            sgd_momentum_step(p, [p[0].copy()], v, 0.05, 0.9)
        np.testing.assert_allclose(p[0], 0.0, atol=1e-6)


def test_clip_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g[0][0], g[1][0]], [0.6, 0.8])
    g = [np.array([0.3])]
    clip_global_norm(g, 1.0)
    assert g[0][0] == 0.3


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"momentum": 1.0}, {"batch_size": 0},
                                    {"max_epochs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SgdConfig(**kw)


class TestRunTraining:
    def test_zero_epochs_is_noop(self, splits):
        m = Mlp.init(8, [6], 10, Pcg32())
        before = snapshot(m)
        _, h = run_training(m, HardLoss(), splits, SgdConfig(max_epochs=0), Pcg32())
        assert len(h) == 0 and h.initial is None
        for a, b in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_mlp_learns(self, splits):
        m = Mlp.init(8, [16], 10, Pcg32(1, 1))
        start = frame_accuracy(m, splits.cv)
        _, h = run_training(m, HardLoss(), splits, SgdConfig(0.5, batch_size=32, max_epochs=8), Pcg32(2, 2))
        assert h.records[-1].train_loss < h.initial.train_loss
        assert frame_accuracy(m, splits.cv) > start + 0.2

    def test_restores_best_cv(self, splits):
        m = Mlp.init(8, [16], 10, Pcg32(1, 1))
        _, h = run_training(m, HardLoss(), splits, SgdConfig(0.5, batch_size=32, max_epochs=8), Pcg32(2, 2))
        best = max([h.initial, *h.records], key=lambda r: r.cv_fa)
        assert frame_accuracy(m, splits.cv) == best.cv_fa

    def test_schedule_halves_and_stops(self, splits):
        m = Mlp.init(8, [16], 10, Pcg32(1, 1))
        cfg = SgdConfig(0.5, batch_size=32, max_epochs=50, min_improvement=1.0)
        _, h = run_training(m, HardLoss(), splits, cfg, Pcg32(2, 2))
        # every epoch fails the threshold: lr halves until below lr0/64
        assert [r.learning_rate for r in h] == [0.5 / 2 ** i for i in range(7)]

    def test_lstm_trains_and_is_deterministic(self, splits):
        def run():
            m = StackedLstm.init(8, 6, 1, 10, Pcg32(3, 3))
            _, h = run_training(m, HardLoss(), splits, SgdConfig(0.1, batch_size=8, max_epochs=2), Pcg32(4, 4))
            return h.loss_trace(), snapshot(m)

        (t1, p1), (t2, p2) = run(), run()
        assert t1 == t2 and t1[-1] < t1[0]
        for a, b in zip(p1, p2):
            assert a.tobytes() == b.tobytes()

    def test_soft_target_alignment(self, splits):
        bad = SoftTargetSet(np.full((3, 10), 0.1), 1.0)
        with pytest.raises(AlignmentError):
            run_training(Mlp.init(8, [4], 10, Pcg32()), SoftLoss(bad), splits, SgdConfig(), Pcg32())
        with pytest.raises(AlignmentError):
            run_training(Mlp.init(8, [4], 10, Pcg32()), LogitMatchLoss(np.zeros((3, 10))), splits,
                         SgdConfig(), Pcg32())


class TestPhases:
    def test_continuous_numbering(self, splits):
        m = Mlp.init(8, [6], 10, Pcg32())
        cfg = SgdConfig(0.3, batch_size=64, max_epochs=2)
        _, h = run_phases(m, [(HardLoss(), cfg), (HardLoss(), cfg)], splits, Pcg32())
        epochs = [r.epoch for r in h]
        assert epochs == sorted(epochs) and epochs[0] == 1

    def test_history_extend(self):
        a = History([EpochRecord(1, 0.1, 1.0, 0.5, 0.5)], EpochRecord(0, 0.1, 2.0, 0.1, 0.1))
        b = History([EpochRecord(1, 0.1, 0.5, 0.6, 0.6)], EpochRecord(0, 0.1, 0.9, 0.5, 0.5))
        a.extend(b)
        assert [r.epoch for r in a] == [1, 1, 2]
        assert a.loss_trace() == [2.0, 1.0, 0.9, 0.5]


class TestMetrics:
    def test_untrained_model_is_near_chance(self, splits):
        m = Mlp.init(8, [4], 10, Pcg32())
        for p in m.parameters():
            p[...] = 0.0
        # all-zero logits predict class 0 everywhere
        assert frame_accuracy(m, splits.test) == pytest.approx(np.mean(splits.test.all_labels == 0))

    def test_segment_error_perfect_and_constant(self):
        labels = [np.array([0, 0, 1, 1, 2])]
        ds = SequenceDataset([np.eye(3)[labels[0]]], labels, 3)
        m = Mlp([], AffineLayer(np.eye(3) * 10))
        assert segment_error_rate(m, ds) == 0.0
        m.output_layer.weights[...] = 0.0
        # predicting "0" everywhere: one run against three reference runs
        assert segment_error_rate(m, ds) == pytest.approx(2 / 3)

    def test_evaluate_metrics(self, splits):
        m = Mlp.init(8, [4], 10, Pcg32())
        got = evaluate_metrics(m, splits, segments=True)
        assert got.test_error_rate == pytest.approx(1 - frame_accuracy(m, splits.test))
        assert got.test_segment_error_rate >= 0

    def test_dataset_logits_chunking_matches_direct(self, splits):
        m = StackedLstm.init(8, 3, 1, 10, Pcg32())
        np.testing.assert_allclose(dataset_logits(m, splits.cv),
                                   m.forward_logits(splits.cv.frames, cache=False), atol=1e-14)


class TestDiagnostic:
    def test_statistics(self):
        rng = Pcg32(1, 1)
        m = Mlp.init(3, [4], 5, rng)
        x = rng.normal(size=(50, 3))
        targets = {t: softmax_t(rng.normal(size=(50, 5)), t) for t in (1.0, 2.0, 5.0)}
        rows = gradient_variance_diagnostic(m, x, [1.0, 2.0, 5.0], targets)
        assert [r.temperature for r in rows] == [1.0, 2.0, 5.0]
        z = m.forward_logits(x, cache=False)
        g = (softmax_t(z, 2.0) - targets[2.0]) / 2.0
        assert rows[1].variance == pytest.approx(np.sum(np.var(g, axis=0)), rel=1e-12)
        assert rows[1].mean_norm == pytest.approx(np.mean(np.linalg.norm(g, axis=1)), rel=1e-12)
        assert all(r.frames == 50 for r in rows)

    def test_misaligned_targets(self):
        m = Mlp.init(3, [4], 5, Pcg32())
        with pytest.raises(AlignmentError):
            gradient_variance_diagnostic(m, np.zeros((4, 3)), [1.0], {1.0: np.full((3, 5), 0.2)})

    def test_fixed_point_has_zero_spread(self):
        rng = Pcg32(2, 2)
        m = Mlp.init(3, [4], 5, rng)
        x = rng.normal(size=(10, 3))
        z = m.forward_logits(x, cache=False)
        rows = gradient_variance_diagnostic(m, x, [1.0, 2.0, 5.0], {t: softmax_t(z, t) for t in (1.0, 2.0, 5.0)})
        assert all(r.variance == 0.0 and r.mean_norm == 0.0 for r in rows)


class TestFrameAccuracy:
    def fixed(self, predictions, labels):
        logits = np.eye(3)[predictions]
        return frame_accuracy_from_logits(logits, np.asarray(labels))

    def test_counting(self):
        assert self.fixed([0, 1, 2, 0, 1], [0, 1, 2, 1, 0]) == 0.6
        assert self.fixed([0, 1], [1, 2]) == 0.0
        assert self.fixed([2, 2], [2, 2]) == 1.0


class TestSmallLearningRateSmoke:
    """One epoch at the default learning rate never raises the training loss."""

    @pytest.mark.parametrize("make", [
        lambda: Mlp.init(8, [64, 64], 10, Pcg32(1, 1)),
        lambda: Mlp.init(8, [48, 48, 48], 10, Pcg32(1, 1)),
        lambda: StackedLstm.init(8, 48, 1, 10, Pcg32(1, 1)),
        lambda: StackedLstm.init(8, 48, 2, 10, Pcg32(1, 1)),
    ], ids=["teacher", "mlp-student", "lstm1", "lstm2"])
    @pytest.mark.parametrize("soft", [False, True])
    def test_loss_does_not_rise(self, splits, make, soft):
        m = make()
        if soft:
            z = Pcg32(9, 9).normal(size=(splits.train.num_frames, 10))
            loss = SoftLoss(SoftTargetSet(softmax_t(z, 2.0), 2.0))
        else:
            loss = HardLoss()
        cfg = SgdConfig(batch_size=16, max_epochs=1)
        assert cfg.learning_rate == 1e-4
        _, h = run_training(m, loss, splits, cfg, Pcg32(5, 5))
        assert h.records[0].train_loss <= h.initial.train_loss
