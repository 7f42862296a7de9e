"""
Tests for world generation, variants, the query/gallery split and dataset export
"""

import numpy as np
import pytest

from src.errors import ConfigError
from src.synth_world import (
    Dataset, DomainSamples, SOURCE, TARGET, WorldConfig, generate_world, load_dataset,
    make_variant, save_dataset, split_query_gallery,
)


class TestGenerateWorld:

    def test_degenerate_world_has_identical_samples(self):
        cfg = WorldConfig(n_identities=3, n_cameras=2, samples_per_identity=4, raw_dim=5,
                          cameras_per_identity=2, noise_sigma=0.0, camera_scale=0.0, domain_shift=0.0)
        world = generate_world(cfg)
        for domain in (world.source, world.target):
            for pid in np.unique(domain.true_ids):
                rows = domain.raw[domain.true_ids == pid]
                np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape))

    def test_seeded_runs_identical(self):
        a = generate_world(WorldConfig(n_identities=5, seed=3))
        b = generate_world(WorldConfig(n_identities=5, seed=3))
        np.testing.assert_array_equal(a.target.raw, b.target.raw)
        np.testing.assert_array_equal(a.query, b.query)

    def test_counts_and_disjoint_pools(self):
        world = generate_world(WorldConfig())
        assert len(world.source) == len(world.target) == 50 * 8
        assert not set(world.source.true_ids) & set(world.target.true_ids)
        assert world.target.indices[0] == len(world.source)

    def test_within_identity_closer_than_between(self):
        world = generate_world(WorldConfig())
        x, ids = world.target.raw, world.target.true_ids
        d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
        same = ids[:, None] == ids[None, :]
        off = ~np.eye(len(ids), dtype=bool)
        assert d[same & off].mean() < d[~same].mean()

    def test_cameras_per_identity_exceeding_cameras(self):
        with pytest.raises(ConfigError):
            generate_world(WorldConfig(n_cameras=2, cameras_per_identity=3))

    def test_training_view_hides_identities(self, tiny_world):
        view = tiny_world.target.training_view()
        assert not hasattr(view, 'true_ids')
        assert len(view) == len(tiny_world.target)


class TestMakeVariant:

    def test_sigma_zero(self, rng):
        x = rng.normal(size=8)
        np.testing.assert_array_equal(make_variant(x, 0.0, 1), x)

    def test_same_seed(self, rng):
        x = rng.normal(size=8)
        np.testing.assert_array_equal(make_variant(x, 0.1, 5), make_variant(x, 0.1, 5))

    def test_perturbation_norm_concentrates(self):
        x = np.zeros(32)
        gen = np.random.default_rng(0)
        norms = [np.linalg.norm(make_variant(x, 0.1, gen)) for _ in range(1000)]
        assert np.mean(norms) == pytest.approx(0.1 * np.sqrt(32), rel=0.03)


def _two_image_world() -> Dataset:
    target = DomainSamples(
        domain=TARGET, raw=np.array([[0.0, 1.0], [1.0, 0.0]]), cameras=np.array([0, 1]),
        true_ids=np.array([7, 7]), indices=np.array([0, 1]),
    )
    source = DomainSamples(
        domain=SOURCE, raw=np.zeros((0, 2)), cameras=np.zeros(0, dtype=int),
        true_ids=np.zeros(0, dtype=int), indices=np.zeros(0, dtype=int),
    )
    return Dataset(source=source, target=target, query=np.zeros(0, dtype=int), gallery=np.arange(2))


class TestSplitQueryGallery:

    def test_single_identity_two_cameras(self):
        split = split_query_gallery(_two_image_world(), 1.0, seed=0)
        assert len(split.query) == 1 and len(split.gallery) == 1
        cams = split.target.cameras
        assert cams[split.query[0]] != cams[split.gallery[0]]

    def test_fraction_zero(self, tiny_world):
        assert len(split_query_gallery(tiny_world, 0.0, seed=0).query) == 0

    def test_every_query_has_cross_camera_match(self):
        world = generate_world(WorldConfig())
        t = world.target
        for q in world.query:
            g = world.gallery
            match = (t.true_ids[g] == t.true_ids[q]) & (t.cameras[g] != t.cameras[q])
            assert match.any()

    def test_single_camera_identity_excluded(self, caplog):
        world = _two_image_world()
        world.target.cameras[:] = 0
        split = split_query_gallery(world, 1.0, seed=0)
        assert len(split.query) == 0
        assert 'single camera' in caplog.text


class TestDatasetExport:

    def test_round_trip(self, tiny_world, run_dir):
        save_dataset(tiny_world, run_dir)
        loaded = load_dataset(run_dir)
        np.testing.assert_array_equal(loaded.target.raw, tiny_world.target.raw)
        np.testing.assert_array_equal(loaded.source.raw, tiny_world.source.raw)
        np.testing.assert_array_equal(loaded.query, tiny_world.query)
        np.testing.assert_array_equal(loaded.source_labels, tiny_world.source_labels)

    def test_hidden_ids(self, tiny_world, run_dir):
        save_dataset(tiny_world, run_dir, include_true_ids=False)
        loaded = load_dataset(run_dir)
        assert np.all(loaded.target.true_ids == -1)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(str(tmp_path / 'nowhere'))
