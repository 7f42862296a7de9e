"""
Clusterer
Density-based pseudo-labelling of target embeddings over a precomputed distance matrix
"""

import logging
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .core_math import l2_normalize, mat64, pairwise_distance
from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

OUTLIER = -1
OUTLIER_TOKEN = 'outlier'


@dataclass
class ClusterAssignment:
    """Pseudo-label per sample (OUTLIER for noise points) and the cluster centroids"""
    labels: np.ndarray
    n_clusters: int
    centroids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < OUTLIER or self.labels.max() >= self.n_clusters):
            raise DomainError(f"labels must be OUTLIER or lie in [0, {self.n_clusters})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def clustered(self) -> np.ndarray:
        """Indices of non-outlier samples"""
        return np.flatnonzero(self.labels != OUTLIER)

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels == OUTLIER)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def canonical_labels(labels) -> np.ndarray:
    """Renumber clusters 0..K-1 by first appearance over ascending sample index"""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, OUTLIER)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab == OUTLIER:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def select_eps(dist: np.ndarray, p: float) -> float:
    """
    Neighborhood radius from a density threshold

    Args:
        dist: Symmetric zero-diagonal distance matrix, or its condensed
              upper-triangle vector
        p: Quantile in (0, 1)

    Returns:
        Nearest-rank p-quantile of the off-diagonal (i < j) distances
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim == 1:
        values = dist
    else:
        dist = mat64(dist)
        if dist.shape[0] < 2:
            raise DomainError("eps selection needs at least two samples")
        values = dist[np.triu_indices(dist.shape[0], k=1)]
    if values.size == 0:
        raise DomainError("eps selection needs at least two samples")
    if not 0.0 < p < 1.0:
        raise ConfigError("must lie in (0, 1)", field='cluster_p')

    values = np.sort(values)
    rank = min(max(math.ceil(p * values.size), 1), values.size)
    return float(values[rank - 1])


def core_distance(dist: np.ndarray, min_pts: int) -> float:
    """
    Median distance from a sample to its (min_pts - 1)-th nearest neighbor

    With eps at this value about half of the samples are DBSCAN core points,
    whatever the size of the set.

    Args:
        dist: Symmetric zero-diagonal distance matrix
        min_pts: DBSCAN core threshold (the sample itself included)

    Returns:
        Median k-distance, k = min_pts - 1 (clipped to N - 1)
    """
    dist = mat64(dist)
    n = dist.shape[0]
    if n < 2:
        raise DomainError("core distance needs at least two samples")
    if min_pts < 1:
        raise ConfigError("must be >= 1", field='min_pts')
    k = min(max(min_pts - 1, 1), n - 1)
    kth = np.partition(dist, k, axis=1)[:, k]
    return float(np.median(kth))


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """
    Classic DBSCAN on a precomputed distance matrix

    A core point has at least ``min_pts`` samples (itself included) within
    ``eps``. Clusters grow from cores in ascending index order; a border point
    reachable from several clusters joins the first one that reaches it.

    Args:
        dist: Symmetric distance matrix
        eps: Neighborhood radius, > 0
        min_pts: Core threshold, >= 1

    Returns:
        ClusterAssignment with canonical label numbering (no centroids)
    """
    dist = mat64(dist)
    if eps <= 0:
        raise ConfigError("must be > 0", field='eps')
    if min_pts < 1:
        raise ConfigError("must be >= 1", field='min_pts')

    n = dist.shape[0]
    neighborhoods = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    is_core = np.array([len(nb) >= min_pts for nb in neighborhoods], dtype=bool)

    labels = np.full(n, OUTLIER, dtype=np.int64)
    cluster_id = 0
    for i in range(n):
        if not is_core[i] or labels[i] != OUTLIER:
            continue
        labels[i] = cluster_id
        queue = deque([i])
        while queue:
            current = queue.popleft()
            for nb in neighborhoods[current]:
                if labels[nb] != OUTLIER:
                    continue
                labels[nb] = cluster_id
                if is_core[nb]:
                    queue.append(nb)
        cluster_id += 1

    labels = canonical_labels(labels)
    logger.debug(f"DBSCAN eps={eps:.6g} min_pts={min_pts}: {cluster_id} clusters, "
                 f"{int(np.sum(labels == OUTLIER))} outliers")
    return ClusterAssignment(labels=labels, n_clusters=cluster_id)


def centroids(embeddings: np.ndarray, assignment: ClusterAssignment) -> np.ndarray:
    """
    Mean embedding of every cluster

    Args:
        embeddings: (N, d) rows aligned with the assignment
        assignment: Cluster labels

    Returns:
        (K, d) centroid matrix
    """
    embeddings = mat64(embeddings)
    if embeddings.shape[0] != len(assignment):
        raise DomainError(f"{embeddings.shape[0]} embeddings for {len(assignment)} labels")
    out = np.zeros((assignment.n_clusters, embeddings.shape[1]))
    for k in range(assignment.n_clusters):
        out[k] = embeddings[assignment.members(k)].mean(axis=0)
    return out


def cluster_embeddings(embeddings: np.ndarray, p: float, min_pts: int,
                       metric: str = 'cosine_dist',
                       distances: Optional[np.ndarray] = None,
                       eps_rule: str = 'quantile') -> ClusterAssignment:
    """
    Pseudo-label a set of embeddings

    Args:
        embeddings: (N, d) target features
        p: Density threshold for eps selection
        min_pts: DBSCAN core threshold
        metric: 'cosine_dist' (on normalized rows) or 'euclidean'
        distances: Externally computed distance matrix used instead of ``metric``
        eps_rule: 'quantile' takes the p-quantile as is; 'core_floor' raises it to
                  at least the median core distance, so small sets still form clusters

    Returns:
        ClusterAssignment with centroids of the (normalized, for cosine) embeddings
    """
    embeddings = mat64(embeddings)
    feats = l2_normalize(embeddings) if metric == 'cosine_dist' else embeddings
    if distances is None:
        dist = pairwise_distance(feats, metric)
    else:
        dist = _validate_distances(distances, embeddings.shape[0])

    eps = select_eps(dist, p)
    if eps_rule == 'core_floor':
        floor = core_distance(dist, min_pts)
        if floor > eps:
            logger.debug(f"eps raised from {eps:.4g} to the core distance {floor:.4g}")
            eps = floor
    elif eps_rule != 'quantile':
        raise ConfigError(f"unknown rule '{eps_rule}'", field='eps_rule')
    if eps <= 0:
        # duplicate samples can put the quantile at zero
        positive = dist[dist > 0]
        eps = float(positive.min()) if positive.size else 1.0
    assignment = dbscan(dist, eps, min_pts)
    assignment.centroids = centroids(feats, assignment)
    logger.info(
        f"Clustering: eps={eps:.4g}, {assignment.n_clusters} clusters, "
        f"{len(assignment.outliers)} outliers of {len(assignment)} samples"
    )
    return assignment


def _validate_distances(dist, n: int) -> np.ndarray:
    dist = mat64(dist)
    if dist.shape != (n, n):
        raise DomainError(f"distance matrix shape {dist.shape} != ({n}, {n})")
    if not np.allclose(dist, dist.T) or np.any(np.diag(dist) != 0.0) or np.any(dist < 0):
        raise DomainError("distance matrix must be symmetric, non-negative, with zero diagonal")
    return dist


def load_distance_matrix(path: str) -> np.ndarray:
    """Read an externally computed distance matrix (.npy or headerless CSV)"""
    if not os.path.exists(path):
        raise ConfigError(f"distance matrix not found: {path}")
    if path.endswith('.npy'):
        dist = np.load(path)
    else:
        dist = pd.read_csv(path, header=None, float_precision='round_trip').to_numpy(dtype=np.float64)
    return _validate_distances(dist, np.asarray(dist).shape[0])


def save_assignment(assignment: ClusterAssignment, path: str, indices=None):
    """Write index,label rows; outliers are written as 'outlier'"""
    indices = np.arange(len(assignment)) if indices is None else np.asarray(indices)
    labels = [OUTLIER_TOKEN if lab == OUTLIER else str(lab) for lab in assignment.labels]
    pd.DataFrame({'index': indices, 'label': labels}).to_csv(path, index=False)
    logger.info(f"✅ Assignment exported to {path}")


def load_assignment(path: str, embeddings: Optional[np.ndarray] = None) -> ClusterAssignment:
    """Read an assignment CSV; centroids are recomputed when embeddings are given"""
    frame = pd.read_csv(path, dtype={'label': str})
    labels = np.array(
        [OUTLIER if lab == OUTLIER_TOKEN else int(lab) for lab in frame['label']], dtype=np.int64
    )
    n_clusters = int(labels.max()) + 1 if np.any(labels != OUTLIER) else 0
    assignment = ClusterAssignment(labels=labels, n_clusters=n_clusters)
    if embeddings is not None:
        assignment.centroids = centroids(embeddings, assignment)
    return assignment
