"""
Anti-Noise Learning Lab
Cross-domain pseudo-labelling with feature alignment, label correction and
instance-level outlier training on seeded synthetic worlds
"""

from .errors import AnlError, ConfigError, DomainError, StageError
from .config import PipelineConfig, load_config, config_hash, component_rng
from .dense_net import DenseNet, AdamState, adam_step
from .synth_world import Dataset, WorldConfig, generate_world, save_dataset, load_dataset
from .fda import MemoryBank, FDAConfig, FDAResult, fda_train
from .clusterer import ClusterAssignment, cluster_embeddings, dbscan, select_eps
from .rss import SoftLabelMatrix, SampleSplit, ReliableVerdict, RSSConfig, run_rss_round
from .trainer import MainModel, TrainingPartition, TripletBatch
from .eval_metrics import MetricsReport, cmc_map, pairwise_f_value, write_report, read_report
from .pipeline import run_pipeline
from .report_generator import ReportGenerator

__version__ = '0.1.1'

__all__ = [
    'AnlError',
    'ConfigError',
    'DomainError',
    'StageError',
    'PipelineConfig',
    'load_config',
    'config_hash',
    'component_rng',
    'DenseNet',
    'AdamState',
    'adam_step',
    'Dataset',
    'WorldConfig',
    'generate_world',
    'save_dataset',
    'load_dataset',
    'MemoryBank',
    'FDAConfig',
    'FDAResult',
    'fda_train',
    'ClusterAssignment',
    'cluster_embeddings',
    'dbscan',
    'select_eps',
    'SoftLabelMatrix',
    'SampleSplit',
    'ReliableVerdict',
    'RSSConfig',
    'run_rss_round',
    'MainModel',
    'TrainingPartition',
    'TripletBatch',
    'MetricsReport',
    'cmc_map',
    'pairwise_f_value',
    'write_report',
    'read_report',
    'run_pipeline',
    'ReportGenerator',
]
