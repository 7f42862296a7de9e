"""
Synthetic World
Seeded source/target embedding domains with identities, cameras and domain shift,
plus CSV / JSON-manifest import and export
"""

import json
import logging
import os
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .config import PipelineConfig, component_rng
from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

SOURCE = 'source'
TARGET = 'target'
UNKNOWN_ID = -1

DATASET_FILE = 'dataset.csv'
MANIFEST_FILE = 'manifest.json'
MANIFEST_VERSION = 1


@dataclass
class WorldConfig:
    """Shape of a synthetic world"""
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
    seed: int = 0

    @classmethod
    def from_pipeline(cls, cfg: PipelineConfig) -> 'WorldConfig':
        return cls(**{name: getattr(cfg, name) for name in cls.__dataclass_fields__})

    def validate(self) -> 'WorldConfig':
        for name in ('n_identities', 'n_cameras', 'samples_per_identity', 'raw_dim', 'cameras_per_identity'):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=name)
        for name in ('camera_scale', 'domain_shift', 'noise_sigma', 'variant_sigma'):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)
        if self.cameras_per_identity > self.n_cameras:
            raise ConfigError(
                f"{self.cameras_per_identity} exceeds n_cameras={self.n_cameras}",
                field='cameras_per_identity'
            )
        return self


@dataclass
class Sample:
    """One observed sample with its metadata"""
    raw: np.ndarray
    camera: int
    domain: str
    true_id: int
    index: int


@dataclass
class TrainingView:
    """What training code may see of a domain: features, cameras and indices, never identities"""
    raw: np.ndarray
    cameras: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass
class DomainSamples:
    """All samples of one domain as parallel arrays"""
    domain: str
    raw: np.ndarray
    cameras: np.ndarray
    true_ids: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.raw.shape[0]

    def training_view(self) -> TrainingView:
        return TrainingView(raw=self.raw, cameras=self.cameras, indices=self.indices)

    def sample(self, i: int) -> Sample:
        return Sample(
            raw=self.raw[i], camera=int(self.cameras[i]), domain=self.domain,
            true_id=int(self.true_ids[i]), index=int(self.indices[i])
        )


@dataclass
class Dataset:
    """
    Source samples with labels, target samples with hidden labels,
    and a query/gallery split given as row positions into the target arrays
    """
    source: DomainSamples
    target: DomainSamples
    query: np.ndarray
    gallery: np.ndarray
    config: Optional[WorldConfig] = None

    @property
    def source_labels(self) -> np.ndarray:
        """Source identities remapped to 0..n-1 for classification"""
        _, labels = np.unique(self.source.true_ids, return_inverse=True)
        return labels

    @property
    def n_source_classes(self) -> int:
        return int(np.unique(self.source.true_ids).size)


def _orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _generate_domain(cfg: WorldConfig, domain: str, rng: np.random.Generator,
                     id_offset: int, index_offset: int) -> DomainSamples:
    d = cfg.raw_dim
    s = cfg.camera_scale

    # camera effect: blend of identity and a random rotation, plus a camera bias
    cam_maps = [(1.0 - s) * np.eye(d) + s * _orthogonal(d, rng) for _ in range(cfg.n_cameras)]
    cam_bias = [s * rng.standard_normal(d) for _ in range(cfg.n_cameras)]
    offset = cfg.domain_shift * rng.standard_normal(d) if domain == TARGET else np.zeros(d)

    latents = rng.standard_normal((cfg.n_identities, d))

    raw, cameras, ids = [], [], []
    for pid in range(cfg.n_identities):
        cams = np.sort(rng.choice(cfg.n_cameras, size=cfg.cameras_per_identity, replace=False))
        for j in range(cfg.samples_per_identity):
            cam = int(cams[j % len(cams)])
            x = cam_maps[cam] @ latents[pid] + cam_bias[cam] + offset
            x = x + cfg.noise_sigma * rng.standard_normal(d)
            raw.append(x)
            cameras.append(cam)
            ids.append(id_offset + pid)

    n = len(raw)
    return DomainSamples(
        domain=domain,
        raw=np.asarray(raw, dtype=np.float64),
        cameras=np.asarray(cameras, dtype=np.int64),
        true_ids=np.asarray(ids, dtype=np.int64),
        indices=np.arange(index_offset, index_offset + n, dtype=np.int64),
    )


def generate_world(cfg: WorldConfig) -> Dataset:
    """
    Generate a seeded source/target world

    Each identity draws a Gaussian latent; every observation is the camera's
    affine map of the latent, plus the domain offset (target only), plus noise.
    Source and target use separate identity pools and separate cameras.

    Args:
        cfg: World configuration

    Returns:
        Dataset with a query/gallery split of the target domain
    """
    cfg.validate()
    rng = component_rng(cfg.seed, 'world')

    source = _generate_domain(cfg, SOURCE, rng, id_offset=0, index_offset=0)
    target = _generate_domain(
        cfg, TARGET, rng, id_offset=cfg.n_identities, index_offset=len(source)
    )
    dataset = Dataset(
        source=source, target=target,
        query=np.zeros(0, dtype=np.int64), gallery=np.arange(len(target), dtype=np.int64),
        config=cfg,
    )
    dataset = split_query_gallery(dataset, cfg.query_fraction, cfg.seed)
    logger.info(
        f"Generated world: {len(source)} source / {len(target)} target samples, "
        f"{len(dataset.query)} queries, {len(dataset.gallery)} gallery"
    )
    return dataset


def make_variant(x, sigma: float, seed) -> np.ndarray:
    """
    Feature-space stand-in for an augmented view: x + sigma * N(0, I)

    Args:
        x: Feature vector (or row batch)
        sigma: Perturbation scale, >= 0
        seed: Seed or numpy Generator

    Returns:
        Perturbed copy of x
    """
    if sigma < 0:
        raise DomainError("variant sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape)


def split_query_gallery(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """
    Single-query split of the target domain

    A ``fraction`` of the multi-camera identities is selected; each selected
    identity keeps one reserved camera entirely in the gallery and sends one
    image from every other camera to the query set.

    Args:
        dataset: Dataset whose target gets split
        fraction: Share of eligible identities contributing queries
        seed: Split seed

    Returns:
        New Dataset with query/gallery row positions
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("must lie in [0, 1]", field='query_fraction')
    rng = component_rng(seed, 'split')
    target = dataset.target

    eligible = []
    for pid in np.unique(target.true_ids):
        rows = np.flatnonzero(target.true_ids == pid)
        if np.unique(target.cameras[rows]).size < 2:
            logger.warning(f"Identity {pid} appears in a single camera; excluded from query")
            continue
        eligible.append(pid)

    n_pick = int(round(fraction * len(eligible)))
    picked = set(rng.choice(eligible, size=n_pick, replace=False).tolist()) if n_pick else set()

    query = []
    for pid in eligible:
        if pid not in picked:
            continue
        rows = np.flatnonzero(target.true_ids == pid)
        cams = np.unique(target.cameras[rows])
        reserved = rng.choice(cams)
        for cam in cams:
            if cam == reserved:
                continue
            cam_rows = rows[target.cameras[rows] == cam]
            query.append(int(rng.choice(cam_rows)))

    query = np.asarray(sorted(query), dtype=np.int64)
    gallery = np.setdiff1d(np.arange(len(target), dtype=np.int64), query)
    return Dataset(
        source=dataset.source, target=dataset.target,
        query=query, gallery=gallery, config=dataset.config,
    )


def save_dataset(dataset: Dataset, out_dir: str, include_true_ids: bool = True) -> Dict[str, str]:
    """
    Write dataset.csv (one row per sample) and manifest.json

    Args:
        dataset: Dataset to export
        out_dir: Output directory (created if missing)
        include_true_ids: Write the true_id column

    Returns:
        Paths of the written files
    """
    os.makedirs(out_dir, exist_ok=True)
    frames = []
    for part in (dataset.source, dataset.target):
        frame = pd.DataFrame(part.raw, columns=[f'f{j}' for j in range(part.raw.shape[1])])
        frame.insert(0, 'index', part.indices)
        frame.insert(1, 'domain', part.domain)
        frame.insert(2, 'camera', part.cameras)
        if include_true_ids:
            frame.insert(3, 'true_id', part.true_ids)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)

    csv_path = os.path.join(out_dir, DATASET_FILE)
    table.to_csv(csv_path, index=False, float_format='%.17g')

    manifest = {
        'version': MANIFEST_VERSION,
        'columns': list(table.columns),
        'n_source': len(dataset.source),
        'n_target': len(dataset.target),
        'raw_dim': int(dataset.source.raw.shape[1]),
        'query': dataset.query.tolist(),
        'gallery': dataset.gallery.tolist(),
        'world_config': asdict(dataset.config) if dataset.config else None,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)

    logger.info(f"✅ Dataset exported to {csv_path}")
    return {'dataset': csv_path, 'manifest': manifest_path}


def _domain_from_frame(frame: pd.DataFrame, domain: str, feature_cols: List[str]) -> DomainSamples:
    true_ids = frame['true_id'] if 'true_id' in frame.columns else pd.Series(UNKNOWN_ID, index=frame.index)
    return DomainSamples(
        domain=domain,
        raw=frame[feature_cols].to_numpy(dtype=np.float64),
        cameras=frame['camera'].to_numpy(dtype=np.int64),
        true_ids=true_ids.fillna(UNKNOWN_ID).to_numpy(dtype=np.int64),
        indices=frame['index'].to_numpy(dtype=np.int64),
    )


def load_dataset(in_dir: str) -> Dataset:
    """
    Read a dataset written by save_dataset (or precomputed embeddings laid out the same way)

    Args:
        in_dir: Directory holding dataset.csv and manifest.json

    Returns:
        Dataset
    """
    csv_path = os.path.join(in_dir, DATASET_FILE)
    manifest_path = os.path.join(in_dir, MANIFEST_FILE)
    if not os.path.exists(csv_path):
        raise ConfigError(f"dataset file not found: {csv_path}")

    table = pd.read_csv(csv_path, float_precision='round_trip')
    for col in ('index', 'domain', 'camera'):
        if col not in table.columns:
            raise ConfigError(f"dataset is missing column '{col}'", field=col)
    feature_cols = [c for c in table.columns if c.startswith('f') and c[1:].isdigit()]
    if not feature_cols:
        raise ConfigError("dataset has no feature columns f0..fN")

    source = _domain_from_frame(table[table['domain'] == SOURCE], SOURCE, feature_cols)
    target = _domain_from_frame(table[table['domain'] == TARGET], TARGET, feature_cols)

    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)

    world_cfg = WorldConfig(**manifest['world_config']) if manifest.get('world_config') else None
    if 'query' in manifest:
        query = np.asarray(manifest['query'], dtype=np.int64)
        gallery = np.asarray(manifest['gallery'], dtype=np.int64)
    else:
        query = np.zeros(0, dtype=np.int64)
        gallery = np.arange(len(target), dtype=np.int64)

    logger.info(f"Loaded dataset from {in_dir}: {len(source)} source / {len(target)} target samples")
    return Dataset(source=source, target=target, query=query, gallery=gallery, config=world_cfg)
