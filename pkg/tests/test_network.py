import math

import numpy as np
import pytest

from crystalloss.exceptions import (
    DimensionMismatch,
    DivergedLoss,
    InsufficientSamples,
    InvalidClassCount,
)
from crystalloss.heads import CrystalHead, SoftmaxHead, alpha_lower_bound
from crystalloss.linalg import cosine_similarity
from crystalloss.network import (
    MlpModel,
    TrainConfig,
    build_head,
    angular_spread,
    extract_features,
    grad_check_model,
    train,
)


def make_blobs(rng, centers, per_class, noise=0.3):
    X, y = [], []
    for label, center in enumerate(centers):
        X.append(center + noise * rng.standard_normal((per_class, len(center))))
        y += [label] * per_class
    return np.vstack(X), np.array(y)


def fresh(seed, sizes=(2, 16, 2), head_kind="softmax", alpha=None, num_classes=3):
    rng = np.random.default_rng(seed)
    model = MlpModel.initialize(list(sizes), rng)
    config = TrainConfig(head_kind=head_kind, alpha=alpha, seed=seed, max_iters=500)
    head = build_head(config, num_classes, sizes[-1], rng)
    return model, head, config


class TestGradCheckModel:
    def test_crystal_head_through_mlp(self, rng):
        model = MlpModel.initialize([2, 8, 2], np.random.default_rng(0))
        head = CrystalHead.initialize(3, 2, 5.0, np.random.default_rng(1))
        X = rng.standard_normal((6, 2))
        y = rng.integers(0, 3, size=6)
        report = grad_check_model(model, head, (X, y), eps=1e-6)
        assert report.max_rel_error < 1e-5
        assert report.passed

    def test_softmax_head_through_mlp(self, rng):
        model = MlpModel.initialize([2, 4, 2], np.random.default_rng(2))
        head = SoftmaxHead.initialize(3, 2, np.random.default_rng(3))
        X = rng.standard_normal((5, 2))
        y = rng.integers(0, 3, size=5)
        report = grad_check_model(model, head, (X, y))
        assert report.max_rel_error < 1e-5

    def test_alpha_column_present_for_trainable(self, rng):
        model = MlpModel.initialize([3, 4, 2], np.random.default_rng(4))
        head = CrystalHead.initialize(4, 2, 3.0, np.random.default_rng(5),
                                      alpha_trainable=True)
        X = rng.standard_normal((4, 3))
        y = rng.integers(0, 4, size=4)
        report = grad_check_model(model, head, (X, y))
        assert "head.alpha" in report.blocks
        assert report.blocks["head.alpha"] < 1e-5

    def test_subsampling_for_large_models(self, rng):
        model = MlpModel.initialize([8, 64, 64, 8], np.random.default_rng(6))
        head = CrystalHead.initialize(5, 8, 4.0, np.random.default_rng(7))
        X = rng.standard_normal((4, 8))
        y = rng.integers(0, 5, size=4)
        report = grad_check_model(model, head, (X, y), max_scalars=250)
        assert report.max_rel_error < 1e-5


class TestTrain:
    def test_separable_blobs_softmax(self, rng):
        X, y = make_blobs(rng, [(3, 0), (-3, 0)], 100)
        model, head, config = fresh(0, head_kind="softmax", num_classes=2)
        model, head, history = train(model, head, (X, y), config)
        assert history.accuracies[-1] == 1.0

    def test_separable_blobs_crystal(self, rng):
        X, y = make_blobs(rng, [(3, 0), (-3, 3), (0, -3)], 70)
        model, head, config = fresh(1, head_kind="crystal_fixed", alpha=4.0)
        model, head, history = train(model, head, (X, y), config)
        assert history.accuracies[-1] == 1.0

    def test_deterministic_given_seed(self, rng):
        X, y = make_blobs(rng, [(2, 1), (-2, -1)], 40)
        runs = []
        for _ in range(2):
            model, head, config = fresh(7, head_kind="crystal_fixed", alpha=4.0,
                                        num_classes=2)
            runs.append(train(model, head, (X, y), config)[2])
        assert runs[0].losses == runs[1].losses
        assert runs[0].accuracies == runs[1].accuracies
        assert runs[0].alphas == runs[1].alphas

    def test_loss_finite_every_iteration(self, rng):
        X, y = make_blobs(rng, [(1, 0), (0, 1)], 30)
        model, head, config = fresh(3, head_kind="crystal_fixed", alpha=8.0,
                                    num_classes=2)
        _, _, history = train(model, head, (X, y), config)
        assert all(math.isfinite(l) for l in history.losses)

    def test_initial_loss_near_ln_c_softmax(self, rng):
        # unconfident classifier at init: first-iteration loss ~ ln C
        X, y = make_blobs(rng, [(1, 0), (0, 1), (-1, 0), (0, -1)], 30, noise=0.2)
        model, head, config = fresh(11, head_kind="softmax", num_classes=4)
        _, _, history = train(model, head, (X, y), config)
        assert abs(history.losses[0] - math.log(4)) < 0.2 * math.log(4)

    def test_initial_loss_near_ln_c_crystal_small_alpha(self, rng):
        X, y = make_blobs(rng, [(1, 0), (0, 1), (-1, 0), (0, -1)], 30, noise=0.2)
        model, head, config = fresh(12, head_kind="crystal_fixed", alpha=1.0,
                                    num_classes=4)
        _, _, history = train(model, head, (X, y), config)
        assert abs(history.losses[0] - math.log(4)) < 0.2 * math.log(4)

    def test_trainable_alpha_stays_positive(self, rng):
        X, y = make_blobs(rng, [(2, 0), (-2, 0), (0, 2)], 40)
        model, head, config = fresh(4, head_kind="crystal_trainable")
        _, head, history = train(model, head, (X, y), config)
        assert history.final_alpha > 0
        assert all(a >= 0.1 for a in history.alphas)

    def test_trainable_alpha_drifts_above_init_bound(self):
        # self-trained alpha relaxes the constraint upward; tolerate a
        # minority of seeds wandering below the initialization bound
        from crystalloss.heads import alpha_lower_bound
        from crystalloss.vmf import make_synthetic_dataset

        bound = alpha_lower_bound(10, 0.9)
        violations = 0
        for seed in range(5):
            ds = make_synthetic_dataset(10, 3, 20.0, 60, seed=seed)
            X, y, _ = ds.to_arrays()
            config = TrainConfig(head_kind="crystal_trainable", seed=seed,
                                 max_iters=800, batch_size=32, base_lr=0.1)
            rng = np.random.default_rng(seed)
            model = MlpModel.initialize([3, 64, 64, 2], rng)
            head = build_head(config, 10, 2, rng)
            _, head, history = train(model, head, (X, y), config)
            violations += history.final_alpha < bound
        assert violations < 3

    def test_alpha_eight_beats_alpha_one(self):
        # crowded 10-class hypersphere task: too small a radius underperforms
        from crystalloss.vmf import make_synthetic_dataset

        ds = make_synthetic_dataset(10, 3, 20.0, 150, seed=2)
        X, y, _ = ds.to_arrays()
        accs = {}
        for alpha in (1.0, 8.0):
            config = TrainConfig(head_kind="crystal_fixed", alpha=alpha, seed=2,
                                 max_iters=1500, batch_size=32, base_lr=0.1,
                                 lr_drop_steps=(1000, 1300))
            rng = np.random.default_rng(2)
            model = MlpModel.initialize([3, 64, 64, 2], rng)
            head = build_head(config, 10, 2, rng)
            _, _, history = train(model, head, (X, y), config)
            accs[alpha] = history.accuracies[-1]
        assert accs[8.0] > accs[1.0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_iteration(self, rng):
        X, y = make_blobs(rng, [(1, 0), (-1, 0)], 20)
        model, head, _ = fresh(5, head_kind="softmax", num_classes=2)
        config = TrainConfig(head_kind="softmax", base_lr=1e9, max_iters=50, seed=0)
        with pytest.raises(DivergedLoss) as excinfo:
            train(model, head, (X, y), config)
        assert excinfo.value.iteration >= 0

    def test_history_lengths(self, rng):
        X, y = make_blobs(rng, [(1, 1), (-1, -1)], 16)
        model, head, _ = fresh(6, head_kind="crystal_fixed", alpha=2.0, num_classes=2)
        config = TrainConfig(head_kind="crystal_fixed", alpha=2.0, max_iters=10,
                             batch_size=8, seed=0)
        _, _, history = train(model, head, (X, y), config)
        assert len(history.losses) == 10
        assert len(history.alphas) == 10
        # 32 samples -> 4 batches/epoch -> 10 iters span 3 epochs
        assert len(history.accuracies) == 3

    def test_lr_schedule_strictly_applied(self):
        config = TrainConfig(base_lr=0.1, lr_drop_steps=(5, 8), lr_drop_factor=0.1)
        from crystalloss.network import _lr_at

        assert _lr_at(config, 0) == pytest.approx(0.1)
        assert _lr_at(config, 4) == pytest.approx(0.1)
        assert _lr_at(config, 5) == pytest.approx(0.01)
        assert _lr_at(config, 8) == pytest.approx(0.001)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr_drop_factor=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_drop_steps=(5, 5))
        with pytest.raises(ValueError):
            TrainConfig(head_kind="other")


class TestBuildHead:
    def test_trainable_defaults_to_bound(self):
        config = TrainConfig(head_kind="crystal_trainable")
        head = build_head(config, 10, 4, np.random.default_rng(0))
        assert head.alpha == pytest.approx(alpha_lower_bound(10, 0.9))
        assert head.alpha_trainable

    def test_trainable_two_classes_requires_explicit_alpha(self):
        config = TrainConfig(head_kind="crystal_trainable")
        with pytest.raises(InvalidClassCount):
            build_head(config, 2, 4, np.random.default_rng(0))
        config = TrainConfig(head_kind="crystal_trainable", alpha=4.0)
        head = build_head(config, 2, 4, np.random.default_rng(0))
        assert head.alpha == 4.0

    def test_fixed_default_alpha(self):
        config = TrainConfig(head_kind="crystal_fixed")
        head = build_head(config, 5, 4, np.random.default_rng(0))
        assert head.alpha == 50.0

    def test_softmax_head(self):
        config = TrainConfig(head_kind="softmax")
        head = build_head(config, 5, 4, np.random.default_rng(0))
        assert isinstance(head, SoftmaxHead)


class TestExtractFeatures:
    def test_identity_single_layer(self):
        model = MlpModel([__import__("crystalloss.network", fromlist=["Layer"]).Layer(
            np.eye(3), np.zeros(3), "identity")])
        X = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(extract_features(model, X), X)

    def test_row_count_and_order(self, rng):
        model = MlpModel.initialize([3, 5, 2], np.random.default_rng(0))
        X = rng.standard_normal((7, 3))
        feats = extract_features(model, X)
        assert feats.shape == (7, 2)
        np.testing.assert_allclose(
            feats[2], extract_features(model, X[2:3])[0], rtol=1e-12
        )

    def test_deterministic(self, rng):
        model = MlpModel.initialize([3, 5, 2], np.random.default_rng(0))
        X = rng.standard_normal((6, 3))
        a = extract_features(model, X)
        b = extract_features(model, X)
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self, rng):
        model = MlpModel.initialize([3, 5, 2], np.random.default_rng(0))
        with pytest.raises(DimensionMismatch):
            extract_features(model, rng.standard_normal((4, 5)))


class TestAngularSpread:
    def test_identical_features_zero_intra(self):
        F = np.array([[1.0, 0.0]] * 4)
        intra, _ = angular_spread(F, [0, 0, 1, 1])
        assert intra == 0.0

    def test_orthogonal_classes(self):
        F = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        intra, inter = angular_spread(F, [0, 0, 1, 1])
        assert intra == 0.0
        assert inter == pytest.approx(1.0)

    def test_matches_brute_force(self, rng):
        F = rng.standard_normal((18, 4))
        y = np.repeat([0, 1, 2], 6)
        intra, inter = angular_spread(F, y)

        intra_lists = {c: [] for c in range(3)}
        inter_list = []
        for i in range(18):
            for j in range(i + 1, 18):
                d = 1 - cosine_similarity(F[i], F[j])
                if y[i] == y[j]:
                    intra_lists[y[i]].append(d)
                else:
                    inter_list.append(d)
        intra_bf = np.mean([np.mean(v) for v in intra_lists.values()])
        assert intra == pytest.approx(intra_bf, abs=1e-12)
        assert inter == pytest.approx(np.mean(inter_list), abs=1e-12)

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            angular_spread(np.eye(3), [0, 0, 0])
        with pytest.raises(InsufficientSamples):
            angular_spread(np.eye(3), [0, 0, 1])
