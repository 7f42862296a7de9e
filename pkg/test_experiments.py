"""
Tests for the seeded ablations

The directional checks run on the default world and are marked slow;
run them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from src.clusterer import OUTLIER, ClusterAssignment
from src.config import PipelineConfig
from src.errors import ConfigError
from src.experiments import EXPERIMENTS, noise_mask, rss_denoising, run_experiment, tau_sweep


class TestNoiseMask:

    def test_majority_identity(self):
        true_ids = np.array([5, 5, 6, 7, 7, 7])
        clean = ClusterAssignment([0, 0, 0, 1, 1, OUTLIER], 2)
        noisy = np.array([0, 1, 0, 1, 1, OUTLIER])
        np.testing.assert_array_equal(noise_mask(true_ids, clean, noisy),
                                      [False, True, True, False, False, False])


class TestTinyRuns:

    def test_unknown_experiment(self, tiny_cfg):
        with pytest.raises(ConfigError):
            run_experiment('everything', tiny_cfg)

    def test_denoising_report(self, tiny_cfg):
        out = rss_denoising(tiny_cfg, rate=0.25)
        assert set(out) == {'f_before', 'f_after', 'flipped', 'flipped_corrected_fraction',
                            'noise_rate_kept', 'noise_rate_rejected'}
        assert 0.0 <= out['flipped_corrected_fraction'] <= 1.0

    def test_tau_sweep_keys(self, tiny_cfg):
        assert set(tau_sweep(tiny_cfg, taus=(0.05, 0.5))) == {0.05, 0.5}

    def test_registry(self):
        assert EXPERIMENTS == ('fda_effect', 'tau_sweep', 'neighbor_sweep', 'rss_denoising', 'outlier_effect')


@pytest.mark.slow
class TestDirectionalTrends:

    def test_alignment_improves_clustering(self):
        out = run_experiment('fda_effect', PipelineConfig())
        assert out['f_fda'] > 0.0
        assert out['f_fda'] > out['f_direct']

    def test_rejected_set_is_noisier(self):
        out = rss_denoising(PipelineConfig(), rate=0.1)
        assert out['flipped_corrected_fraction'] >= 0.5
        assert out['noise_rate_rejected'] > out['noise_rate_kept']

    def test_instance_outliers_help(self):
        out = run_experiment('outlier_effect', PipelineConfig())
        assert out['instance'] >= out['discard']

    def test_f_value_rises_across_rounds(self):
        from src.pipeline import run_pipeline

        report = run_pipeline(PipelineConfig())
        assert report.stages['fda']['n_clusters'] > 0
        assert any(p['reliable'] > 0 for p in report.partitions)
        assert any(not row['skipped'] for row in report.traces['main'])
        by_stage = {row['stage']: row['f'] for row in report.f_trace}
        rounds = PipelineConfig().main_epochs // PipelineConfig().alternation_period
        for r in range(rounds):
            assert by_stage[f'round{r}-after'] >= by_stage[f'round{r}-before']

    def test_moderate_temperature_clusters_best(self):
        out = tau_sweep(PipelineConfig(), taus=(0.01, 0.05, 0.5))
        assert out[0.05] > out[0.01]
        assert out[0.05] > out[0.5]
