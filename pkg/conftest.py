"""
Shared test fixtures: tiny configurations and worlds that train in seconds
"""

import numpy as np
import pytest

from src.config import PipelineConfig
from src.synth_world import WorldConfig, generate_world


TINY = dict(
    n_identities=6, n_cameras=2, samples_per_identity=4, raw_dim=8,
    cameras_per_identity=2, embed_dim=8, hidden_dim=12, disc_hidden=8,
    fda_epochs=1, batch_size=16, main_epochs=2, alternation_period=2,
    stage1_epochs=1, stage2_epochs=1, k=2, min_pts=2, cluster_p=0.05,
    p_identities=3, k_instances=2, max_outliers=2, r2=2,
)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_cfg():
    return PipelineConfig(**TINY).validate()


@pytest.fixture
def tiny_world(tiny_cfg):
    return generate_world(WorldConfig.from_pipeline(tiny_cfg))


@pytest.fixture
def run_dir(tmp_path):
    out = tmp_path / 'run'
    out.mkdir()
    return str(out)
