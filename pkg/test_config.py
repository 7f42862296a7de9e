"""
Tests for configuration loading, validation and seeded streams
"""

import numpy as np
import pytest

from src.config import (
    PipelineConfig, component_rng, config_from_dict, config_hash, default_run_dir, load_config,
)
from src.errors import ConfigError


class TestDefaults:

    def test_published_values(self):
        cfg = PipelineConfig().validate()
        assert cfg.fda_epochs == 10 and cfg.main_epochs == 40 and cfg.alternation_period == 5
        assert cfg.cluster_p == 1.6e-4
        assert (cfg.tau, cfg.alpha, cfg.r2) == (0.05, 0.2, 4)
        assert (cfg.k, cfg.confidence, cfg.mu) == (12, 0.9, 10.0)
        assert (cfg.lambda_c, cfg.lambda_e) == (0.1, 0.1)
        assert (cfg.batch_size, cfg.lr) == (64, 0.00035)

    def test_derived_values(self):
        cfg = PipelineConfig()
        assert cfg.neighbor_r1 == 2
        assert cfg.label_learning_rate == 2.0
        assert cfg.eps_rule == 'core_floor'
        assert PipelineConfig(r1=3, label_lr=0.5).neighbor_r1 == 3


class TestValidation:

    @pytest.mark.parametrize('field,value', [
        ('tau', 1.0), ('alpha', 1.5), ('cluster_p', 0.0), ('confidence', 0.0),
        ('mu', 0.0), ('k', 0), ('corruption_rate', 1.0), ('reliable_mode', 'vote'),
        ('outlier_mode', 'drop'), ('cameras_per_identity', 9), ('eps_rule', 'knee'),
        ('aux_temperature', 0.0),
    ])
    def test_out_of_range(self, field, value):
        with pytest.raises(ConfigError) as err:
            config_from_dict({field: value})
        assert err.value.field == field

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match='unknown'):
            config_from_dict({'temperature': 0.1})

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            config_from_dict({'fda_epochs': 'ten'})
        with pytest.raises(ConfigError):
            config_from_dict({'batch_size': True})

    def test_int_accepted_for_float(self):
        assert config_from_dict({'mu': 5}).mu == 5.0

    def test_overrides_keep_other_values(self):
        cfg = PipelineConfig(seed=4).with_overrides(tau=0.1)
        assert cfg.tau == 0.1 and cfg.seed == 4


class TestLoadConfig:

    def test_yaml(self, tmp_path):
        path = tmp_path / 'run.yaml'
        path.write_text('tau: 0.1\nr2: 6\nreliable_mode: distance\n', encoding='utf-8')
        cfg = load_config(path)
        assert (cfg.tau, cfg.r2, cfg.reliable_mode) == (0.1, 6, 'distance')

    def test_key_value(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text('# sweep\nmain_epochs = 0\nuse_adversarial = false\n', encoding='utf-8')
        cfg = load_config(path)
        assert cfg.main_epochs == 0
        assert cfg.use_adversarial is False

    def test_malformed_line(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text('tau 0.1\n', encoding='utf-8')
        with pytest.raises(ConfigError, match=':1:'):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match='not found'):
            load_config(tmp_path / 'absent.yaml')

    def test_run_dir_from_environment(self, monkeypatch):
        monkeypatch.setenv('ANL_RUN_DIR', '/tmp/anl-runs')
        assert default_run_dir() == '/tmp/anl-runs'
        monkeypatch.delenv('ANL_RUN_DIR')
        assert default_run_dir() == './runs'


class TestSeeding:

    def test_streams_reproducible_and_independent(self):
        a = component_rng(7, 'world').normal(size=4)
        b = component_rng(7, 'world').normal(size=4)
        c = component_rng(7, 'fda').normal(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_hash_tracks_values(self):
        assert config_hash(PipelineConfig()) == config_hash(PipelineConfig())
        assert config_hash(PipelineConfig()) != config_hash(PipelineConfig(seed=1))
