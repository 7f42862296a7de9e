"""
Tests for the batch-hard triplet loss, PK sampling, partitions and main-model epochs
"""

import numpy as np
import pytest

from src.clusterer import OUTLIER, ClusterAssignment
from src.core_math import finite_diff_grad, relative_error
from src.dense_net import build_classifier, build_encoder
from src.errors import DomainError
from src.fda import source_ce_loss_grad
from src.rss import ReliableVerdict
from src.trainer import (
    MainConfig, MainModel, TRACE_COLUMNS, TrainingPartition, apply_outlier_mode,
    batch_hard_triplet_loss_grad, main_epoch, main_model_loss, main_partition, sample_pk,
    sample_triplet_batch,
)


def _model(raw_dim: int, n_classes: int, seed: int = 0) -> MainModel:
    rng = np.random.default_rng(seed)
    encoder = build_encoder(raw_dim, 6, 4, rng)
    return MainModel(encoder=encoder, classifier=build_classifier(4, n_classes, rng), lr=1e-3)


class TestBatchHardTriplet:

    def test_one_dimensional_example(self):
        result = batch_hard_triplet_loss_grad(np.array([[0.0], [1.0], [1.2]]), [0, 0, 1], None, 0.3)
        assert result.anchor_losses[0] == pytest.approx(0.1)

    def test_satisfied_margin(self):
        feats = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
        result = batch_hard_triplet_loss_grad(feats, [0, 0, 1, 1], None, 0.3)
        assert result.loss == 0.0
        np.testing.assert_array_equal(result.grad_features, 0.0)

    def test_outlier_anchor_uses_its_variant(self):
        feats = np.array([[0.0], [10.0]])
        variants = np.array([[0.5]])
        result = batch_hard_triplet_loss_grad(feats, [OUTLIER, OUTLIER], np.array([[0.5], [10.0]]), 0.3)
        assert result.anchor_losses[0] == 0.0
        assert result.anchor_losses[1] == 0.0
        single = batch_hard_triplet_loss_grad(np.array([[0.0], [0.4]]), [OUTLIER, 7], variants, 0.3)
        assert single.anchor_losses[0] == pytest.approx(0.3 + 0.5 - 0.4)

    def test_anchor_without_positive_excluded(self, caplog):
        result = batch_hard_triplet_loss_grad(np.array([[0.0], [1.0], [3.0]]), [0, 0, 1], None, 0.3)
        assert not result.included[2]
        assert 'no positive' in caplog.text

    def test_gradients_match_finite_differences(self):
        labels = np.array([0, 0, 1, 1, OUTLIER, OUTLIER])
        for seed in range(20):
            rng = np.random.default_rng(seed)
            feats = rng.normal(size=(6, 3))
            variants = rng.normal(size=(2, 3))
            result = batch_hard_triplet_loss_grad(feats, labels, variants, 1.0)

            num_f = finite_diff_grad(lambda v: batch_hard_triplet_loss_grad(v, labels, variants, 1.0).loss, feats)
            num_v = finite_diff_grad(lambda v: batch_hard_triplet_loss_grad(feats, labels, v, 1.0).loss, variants)
            assert relative_error(result.grad_features, num_f) <= 1e-4
            assert relative_error(result.grad_variants, num_v) <= 1e-4

    def test_translation_invariant(self, rng):
        labels = np.array([0, 0, 1, 1, OUTLIER])
        feats, variants = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
        shift = rng.normal(size=3) * 10
        a = batch_hard_triplet_loss_grad(feats, labels, variants, 0.5)
        b = batch_hard_triplet_loss_grad(feats + shift, labels, variants + shift, 0.5)
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        np.testing.assert_allclose(a.grad_features, b.grad_features, atol=1e-12)

    def test_variant_count_must_match(self, rng):
        with pytest.raises(DomainError):
            batch_hard_triplet_loss_grad(rng.normal(size=(3, 2)), [0, 0, OUTLIER], None, 0.3)

    def test_negative_margin(self, rng):
        with pytest.raises(DomainError):
            batch_hard_triplet_loss_grad(rng.normal(size=(2, 2)), [0, 1], None, -0.1)


class TestMainModelLoss:

    def test_composition(self, rng):
        feats = rng.normal(size=(6, 4))
        labels = np.array([0, 0, 1, 1, OUTLIER, OUTLIER])
        logits = rng.normal(size=(4, 2))
        variants = rng.normal(size=(2, 4))
        loss = main_model_loss(logits, feats, labels, variants, 0.3)
        l_ce, _ = source_ce_loss_grad(logits, labels[:4])
        trip = batch_hard_triplet_loss_grad(feats, labels, variants, 0.3)
        assert loss.total == pytest.approx(l_ce + trip.loss)

    def test_outliers_must_follow_labeled_rows(self, rng):
        with pytest.raises(DomainError):
            main_model_loss(rng.normal(size=(2, 2)), rng.normal(size=(3, 4)), [OUTLIER, 0, 1],
                            rng.normal(size=(1, 4)), 0.3)


class TestSampling:

    def test_pk_shape_and_replacement(self, rng):
        indices = np.arange(7)
        labels = np.array([0, 0, 0, 0, 1, 2, 2])
        idx, lab = sample_pk(indices, labels, p=3, k=4, rng=rng)
        assert idx.size == 12
        for c in (0, 1, 2):
            assert np.sum(lab == c) == 4
            assert set(idx[lab == c]) <= set(indices[labels == c])

    def test_more_identities_requested_than_present(self, rng):
        _, lab = sample_pk(np.arange(4), np.array([0, 0, 1, 1]), p=8, k=2, rng=rng)
        assert set(lab) == {0, 1}

    def test_outliers_appended_without_repeats(self, rng):
        batch = sample_triplet_batch(np.arange(4), [0, 0, 1, 1], np.arange(4, 10), 2, 2, 3, rng)
        assert batch.n_labeled == 4
        assert batch.outlier_indices.size == 3
        assert len(set(batch.outlier_indices)) == 3


class TestPartition:

    def test_coverage_with_verdict(self):
        assignment = ClusterAssignment([0, 0, OUTLIER, 1, 1], 2)
        verdict = ReliableVerdict(indices=np.array([0, 1, 3, 4]), y_c=np.array([0, 0, 1, 1]),
                                  y_n=np.array([0, 1, 1, 1]), kept=np.array([True, False, True, True]))
        partition = main_partition(assignment, verdict).check_coverage(5)
        assert partition.counts() == {'reliable': 3, 'rejected': 1, 'outliers': 1}
        np.testing.assert_array_equal(partition.reliable_labels, [0, 1, 1])

    def test_overlap_detected(self):
        partition = TrainingPartition(np.array([0, 1]), np.array([0, 0]), np.array([1]), np.array([2]))
        with pytest.raises(DomainError):
            partition.check_coverage(3)

    def test_outlier_modes(self):
        partition = TrainingPartition(np.array([0, 2]), np.array([0, 1]), np.array([3]), np.array([1]))
        emb = np.array([[0.0], [0.1], [5.0], [4.9]])

        labeled, _, instances = apply_outlier_mode(partition, 'instance')
        np.testing.assert_array_equal(instances, [1, 3])
        np.testing.assert_array_equal(labeled, [0, 2])

        _, _, instances = apply_outlier_mode(partition, 'discard')
        assert instances.size == 0

        labeled, labels, instances = apply_outlier_mode(partition, 'near', emb)
        np.testing.assert_array_equal(labeled, [0, 2, 1, 3])
        np.testing.assert_array_equal(labels, [0, 1, 0, 1])
        assert instances.size == 0

        with pytest.raises(DomainError):
            apply_outlier_mode(partition, 'near')


class TestMainEpoch:

    def _partition(self) -> TrainingPartition:
        return TrainingPartition(np.arange(8), np.repeat([0, 1], 4), np.array([8]), np.array([9]))

    def test_seeded_runs_identical(self, rng):
        raw = rng.normal(size=(10, 5))
        cfg = MainConfig(p_identities=2, k_instances=2, max_outliers=2, lr=1e-3)
        models = [_model(5, 2), _model(5, 2)]
        rows = [main_epoch(m, self._partition(), raw, cfg, epoch=1) for m in models]
        assert rows[0] == rows[1]
        for a, b in zip(models[0].params(), models[1].params()):
            np.testing.assert_array_equal(a, b)

    def test_attribution_counts(self, rng):
        raw = rng.normal(size=(10, 5))
        cfg = MainConfig(p_identities=2, k_instances=2, max_outliers=2)
        row = main_epoch(_model(5, 2), self._partition(), raw, cfg, epoch=0)
        assert list(row) == TRACE_COLUMNS
        assert row['n_ce_rows'] == 8
        assert row['n_outlier_anchors'] == 4
        assert row['l_total'] == pytest.approx(row['l_ce'] + row['l_triplet'])

    def test_discard_mode_has_no_outlier_anchors(self, rng):
        raw = rng.normal(size=(10, 5))
        cfg = MainConfig(p_identities=2, k_instances=2, outlier_mode='discard')
        row = main_epoch(_model(5, 2), self._partition(), raw, cfg, epoch=0)
        assert row['n_outlier_anchors'] == 0

    def test_no_reliable_samples_skips(self, rng, caplog):
        model = _model(5, 2)
        before = [p.copy() for p in model.params()]
        partition = TrainingPartition(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.array([0]), np.array([1]))
        row = main_epoch(model, partition, rng.normal(size=(2, 5)), MainConfig(), epoch=0)
        assert row['skipped']
        assert 'skipping' in caplog.text
        for a, b in zip(model.params(), before):
            np.testing.assert_array_equal(a, b)


class TestMainModel:

    def test_head_rebuilt_on_cluster_change(self, rng):
        model = _model(5, 3)
        assert not model.ensure_classes(3, rng)
        assert model.ensure_classes(5, rng)
        assert model.n_classes == 5
        assert model.state.step == 0

    def test_save_load(self, rng, tmp_path):
        model = _model(5, 3)
        path = str(tmp_path / 'main_model.json')
        model.save(path)
        loaded = MainModel.load(path)
        x = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(loaded.encoder.predict(x), model.encoder.predict(x))
        assert loaded.n_classes == 3
