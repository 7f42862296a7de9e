"""
Configuration
Flat pipeline configuration, file loading (YAML / JSON / key=value) and seeding
"""

import dataclasses
import hashlib
import json
import logging
import os
import zlib
from dataclasses import dataclass, fields, asdict
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from .errors import ConfigError

logger = logging.getLogger(__name__)

RUN_DIR_ENV = 'ANL_RUN_DIR'
DEFAULT_RUN_DIR = './runs'

RELIABLE_MODES = ('rss', 'distance', 'none')
OUTLIER_MODES = ('instance', 'discard', 'near')
CLUSTER_METRICS = ('cosine_dist', 'euclidean')
EPS_RULES = ('core_floor', 'quantile')

# per-sample step on the label logits; below 2 / L for the softmax loss (L <= 0.55)
DEFAULT_LABEL_LR = 2.0


@dataclass
class PipelineConfig:
    """Every knob of the lab in one flat record; defaults are the published settings"""

    seed: int = 0

    # synthetic world
    n_identities: int = 50
    n_cameras: int = 4
    samples_per_identity: int = 8
    raw_dim: int = 32
    camera_scale: float = 0.3
    domain_shift: float = 1.0
    noise_sigma: float = 0.3
    cameras_per_identity: int = 4
    variant_sigma: float = 0.1
    query_fraction: float = 0.5

    # networks
    embed_dim: int = 32
    hidden_dim: int = 64
    disc_hidden: int = 32
    disc_layers: int = 2

    # feature distribution alignment
    fda_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.00035
    tau: float = 0.05
    alpha: float = 0.2
    r2: int = 4
    r1: Optional[int] = None
    use_contrastive: bool = True
    use_adversarial: bool = True
    refresh_neighbors_per_iteration: bool = False
    renormalize_targets: bool = False
    freeze_variants: bool = False

    # clustering
    cluster_p: float = 1.6e-4
    min_pts: int = 4
    cluster_metric: str = 'cosine_dist'
    eps_rule: str = 'core_floor'
    recluster_each_round: bool = True

    # reliable sample selection
    k: int = 12
    confidence: float = 0.9
    mu: float = 10.0
    lambda_c: float = 0.1
    lambda_e: float = 0.1
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    label_lr: Optional[float] = None
    aux_temperature: float = 0.05
    reverse_kl: bool = False
    reliable_mode: str = 'rss'
    corruption_rate: float = 0.0

    # main model
    main_epochs: int = 40
    alternation_period: int = 5
    margin: float = 0.3
    p_identities: int = 8
    k_instances: int = 4
    max_outliers: int = 8
    outlier_mode: str = 'instance'

    @property
    def neighbor_r1(self) -> int:
        """Intra-camera neighbor count; half of r2 unless set explicitly"""
        return self.r1 if self.r1 is not None else self.r2 // 2

    @property
    def label_learning_rate(self) -> float:
        """Per-sample step size for the soft-label logits"""
        return self.label_lr if self.label_lr is not None else DEFAULT_LABEL_LR

    def validate(self) -> 'PipelineConfig':
        """
        Check every value against its documented range

        Returns:
            self, for chaining

        Raises:
            ConfigError: naming the first offending field
        """
        for f in fields(self):
            _check_type(f.name, getattr(self, f.name), _FIELD_TYPES[f.name])

        positive_ints = [
            'n_identities', 'n_cameras', 'samples_per_identity', 'raw_dim',
            'cameras_per_identity', 'embed_dim', 'hidden_dim', 'disc_hidden',
            'disc_layers', 'batch_size', 'min_pts', 'k', 'alternation_period',
            'p_identities', 'k_instances',
        ]
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=name)

        non_negative = [
            'seed', 'camera_scale', 'domain_shift', 'noise_sigma', 'variant_sigma',
            'fda_epochs', 'r2', 'stage1_epochs', 'stage2_epochs', 'main_epochs',
            'margin', 'max_outliers', 'lambda_c', 'lambda_e',
        ]
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)

        if self.r1 is not None and self.r1 < 0:
            raise ConfigError("must be >= 0", field='r1')
        if self.label_lr is not None and self.label_lr < 0:
            raise ConfigError("must be >= 0", field='label_lr')
        if self.cameras_per_identity > self.n_cameras:
            raise ConfigError(
                f"{self.cameras_per_identity} exceeds n_cameras={self.n_cameras}",
                field='cameras_per_identity'
            )
        if not 0.0 <= self.query_fraction <= 1.0:
            raise ConfigError("must lie in [0, 1]", field='query_fraction')
        if self.lr <= 0:
            raise ConfigError("must be > 0", field='lr')
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("must lie in (0, 1)", field='tau')
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("must lie in [0, 1]", field='alpha')
        if not 0.0 < self.cluster_p < 1.0:
            raise ConfigError("must lie in (0, 1)", field='cluster_p')
        if not 0.0 < self.confidence <= 1.0:
            raise ConfigError("must lie in (0, 1]", field='confidence')
        if self.mu <= 0:
            raise ConfigError("must be > 0", field='mu')
        if not 0.0 <= self.corruption_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", field='corruption_rate')
        if self.cluster_metric not in CLUSTER_METRICS:
            raise ConfigError(f"expected one of {CLUSTER_METRICS}", field='cluster_metric')
        if self.eps_rule not in EPS_RULES:
            raise ConfigError(f"expected one of {EPS_RULES}", field='eps_rule')
        if self.aux_temperature <= 0:
            raise ConfigError("must be > 0", field='aux_temperature')
        if self.reliable_mode not in RELIABLE_MODES:
            raise ConfigError(f"expected one of {RELIABLE_MODES}", field='reliable_mode')
        if self.outlier_mode not in OUTLIER_MODES:
            raise ConfigError(f"expected one of {OUTLIER_MODES}", field='outlier_mode')
        return self

    def with_overrides(self, **overrides) -> 'PipelineConfig':
        """Copy with some fields replaced; unknown names are config errors"""
        return config_from_dict(overrides, base=self)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _field_types() -> Dict[str, Any]:
    hints = {}
    for f in fields(PipelineConfig):
        if f.name == 'r1':
            hints[f.name] = (int, type(None))
        elif f.name == 'label_lr':
            hints[f.name] = (float, type(None))
        else:
            hints[f.name] = type(f.default)
    return hints


_FIELD_TYPES = _field_types()


def _check_type(name: str, value: Any, expected) -> None:
    allowed = expected if isinstance(expected, tuple) else (expected,)
    if isinstance(value, bool) and bool not in allowed:
        raise ConfigError(f"expected {_type_names(allowed)}, got a boolean", field=name)
    if float in allowed and isinstance(value, int) and not isinstance(value, bool):
        return
    if not isinstance(value, allowed):
        raise ConfigError(
            f"expected {_type_names(allowed)}, got {type(value).__name__} ({value!r})",
            field=name
        )


def _type_names(types) -> str:
    return ' or '.join('null' if t is type(None) else t.__name__ for t in types)


def _coerce(name: str, value: Any) -> Any:
    expected = _FIELD_TYPES[name]
    _check_type(name, value, expected)
    allowed = expected if isinstance(expected, tuple) else (expected,)
    if float in allowed and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def config_from_dict(values: Dict[str, Any], base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """
    Build a validated config from a flat mapping

    Args:
        values: key -> value; every key must be a PipelineConfig field
        base: Config supplying the values not mentioned (defaults if None)

    Returns:
        Validated PipelineConfig
    """
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"config must be a flat mapping, got {type(values).__name__}")

    coerced = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError("unknown configuration key", field=str(key))
        coerced[key] = _coerce(key, value)

    base = base if base is not None else PipelineConfig()
    return dataclasses.replace(base, **coerced).validate()


def _parse_key_value(text: str, path: str) -> Dict[str, Any]:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f"{path}:{line_no}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{line_no}: duplicate key", field=key)
        try:
            values[key] = yaml.safe_load(value) if value else None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}:{line_no}: cannot parse value {value!r}: {e}", field=key)
    return values


def load_config(path: Union[str, os.PathLike]) -> PipelineConfig:
    """
    Load configuration from a YAML, JSON or key=value file

    Args:
        path: Config file; '.yaml'/'.yml'/'.json' are parsed as YAML,
              anything else as flat key=value lines

    Returns:
        Validated PipelineConfig

    Raises:
        ConfigError: missing file, parse failure, unknown key or bad value
    """
    path = os.fspath(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")

    suffix = os.path.splitext(path)[1].lower()
    if suffix in ('.yaml', '.yml', '.json'):
        try:
            values = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
    else:
        values = _parse_key_value(text, path)

    cfg = config_from_dict(values or {})
    logger.info(f"Loaded configuration from {path}")
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Short stable fingerprint of a configuration"""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def default_run_dir() -> str:
    """Run directory from the environment, falling back to ./runs"""
    return os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR


def component_rng(seed: int, component: str) -> np.random.Generator:
    """
    Independent PCG64 stream for one named component of a seeded run

    The stream is keyed by crc32(component) in the SeedSequence spawn key,
    so adding a component never shifts the streams of the others.

    Args:
        seed: Run seed
        component: Stream name, e.g. 'world' or 'fda'

    Returns:
        numpy Generator
    """
    key = zlib.crc32(component.encode('utf-8'))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))
