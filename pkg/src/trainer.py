"""
Trainer
Main-model training over reliable pseudo-labels with instance-level
outlier handling (cross-entropy + batch-hard triplet)
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .clusterer import OUTLIER, ClusterAssignment
from .config import PipelineConfig, component_rng
from .core_math import mat64
from .dense_net import AdamState, DenseNet, adam_step, build_classifier, concat_params
from .errors import DomainError
from .fda import source_ce_loss_grad
from .synth_world import make_variant

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['epoch', 'l_ce', 'l_triplet', 'l_total', 'n_ce_rows', 'n_outlier_anchors', 'skipped']


@dataclass
class TripletBatch:
    """P identities x K rows of labeled samples plus appended outlier samples"""
    indices: np.ndarray
    labels: np.ndarray
    outlier_indices: np.ndarray

    @property
    def n_labeled(self) -> int:
        return self.indices.shape[0]


@dataclass
class TripletResult:
    """Batch-hard triplet loss, per-anchor terms and gradients"""
    loss: float
    anchor_losses: np.ndarray
    included: np.ndarray
    grad_features: np.ndarray
    grad_variants: np.ndarray


def _euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _unit_diff(a: np.ndarray, b: np.ndarray, dist: float) -> np.ndarray:
    # subgradient 0 where the two points coincide
    return (a - b) / dist if dist > 0.0 else np.zeros_like(a)


def batch_hard_triplet_loss_grad(features: np.ndarray, labels, outlier_variants: Optional[np.ndarray],
                                 margin: float) -> TripletResult:
    """
    Batch-hard triplet loss with instance anchors for outliers

    For a labeled anchor the hardest positive is the farthest row with the
    same label; for an outlier anchor (label OUTLIER) the positive is its own
    variant. The hardest negative is the nearest row of any other label
    (outlier anchors treat every other row as a negative).
    loss_a = max(0, margin + d(a, p) - d(a, n)), averaged over anchors.

    Args:
        features: (n, d) anchor features
        labels: Label per row, OUTLIER for instance rows
        outlier_variants: (n_outliers, d) variant features, in outlier-row order
        margin: Hinge margin, >= 0

    Returns:
        TripletResult; anchors without a positive or negative are excluded
    """
    if margin < 0:
        raise DomainError("triplet margin must be >= 0")
    features = mat64(features)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = features.shape
    out_rows = np.flatnonzero(labels == OUTLIER)
    if outlier_variants is None:
        outlier_variants = np.zeros((0, d))
    outlier_variants = np.asarray(outlier_variants, dtype=np.float64).reshape(-1, d)
    if outlier_variants.shape[0] != out_rows.shape[0]:
        raise DomainError(f"{outlier_variants.shape[0]} variants for {out_rows.shape[0]} outlier rows")
    variant_of = {int(r): j for j, r in enumerate(out_rows)}

    dist = _euclidean(features)
    grad_f = np.zeros_like(features)
    grad_v = np.zeros_like(outlier_variants)
    anchor_losses = np.zeros(n)
    included = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for a in range(n):
        if labels[a] == OUTLIER:
            j = variant_of[a]
            d_ap = float(np.linalg.norm(features[a] - outlier_variants[j]))
            negatives = rows[rows != a]
            pos_point = outlier_variants[j]
        else:
            positives = rows[(labels == labels[a]) & (rows != a)]
            negatives = rows[labels != labels[a]]
            if positives.size == 0:
                logger.warning(f"Triplet anchor {a} has no positive; excluded")
                continue
            p = positives[np.argmax(dist[a, positives])]
            d_ap = float(dist[a, p])
            pos_point = features[p]
        if negatives.size == 0:
            logger.warning(f"Triplet anchor {a} has no negative; excluded")
            continue

        neg = negatives[np.argmin(dist[a, negatives])]
        d_an = float(dist[a, neg])
        included[a] = True
        anchor_losses[a] = max(0.0, margin + d_ap - d_an)
        if anchor_losses[a] <= 0.0:
            continue

        g_ap = _unit_diff(features[a], pos_point, d_ap)
        g_an = _unit_diff(features[a], features[neg], d_an)
        grad_f[a] += g_ap - g_an
        grad_f[neg] += g_an
        if labels[a] == OUTLIER:
            grad_v[variant_of[a]] -= g_ap
        else:
            grad_f[p] -= g_ap

    n_inc = int(included.sum())
    if n_inc == 0:
        return TripletResult(0.0, anchor_losses, included, grad_f, grad_v)
    return TripletResult(
        loss=float(anchor_losses[included].sum() / n_inc),
        anchor_losses=anchor_losses,
        included=included,
        grad_features=grad_f / n_inc,
        grad_variants=grad_v / n_inc,
    )


@dataclass
class MainLoss:
    """Cross-entropy on labeled rows plus triplet on every row"""
    l_ce: float
    l_triplet: float
    grad_logits: np.ndarray
    grad_features: np.ndarray
    grad_variants: np.ndarray

    @property
    def total(self) -> float:
        return self.l_ce + self.l_triplet


def main_model_loss(class_logits: np.ndarray, features: np.ndarray, labels,
                    outlier_variants: Optional[np.ndarray], margin: float) -> MainLoss:
    """
    L_total = L_ce + L_triplet with unit weights

    Args:
        class_logits: (n_labeled, c) logits of the labeled rows (the first rows of ``features``)
        features: (n, d) features, labeled rows first, then outlier rows
        labels: Label per feature row, OUTLIER for instance rows
        outlier_variants: Variant features of the outlier rows
        margin: Triplet margin

    Returns:
        MainLoss; outlier rows never contribute to L_ce
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_lab = class_logits.shape[0]
    if np.any(labels[:n_lab] == OUTLIER) or np.any(labels[n_lab:] != OUTLIER):
        raise DomainError("labeled rows must precede outlier rows")

    if n_lab:
        l_ce, g_logits = source_ce_loss_grad(class_logits, labels[:n_lab])
    else:
        l_ce, g_logits = 0.0, np.zeros_like(class_logits)
    trip = batch_hard_triplet_loss_grad(features, labels, outlier_variants, margin)
    return MainLoss(
        l_ce=l_ce, l_triplet=trip.loss, grad_logits=g_logits,
        grad_features=trip.grad_features, grad_variants=trip.grad_variants,
    )


def sample_pk(indices: np.ndarray, labels: np.ndarray, p: int, k: int,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw P identities and K samples of each (with replacement when an identity is smaller)

    Args:
        indices: Candidate sample indices
        labels: Label of each candidate
        p: Identities per batch
        k: Samples per identity
        rng: Random stream

    Returns:
        (sample indices, labels), grouped by identity
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    chosen = rng.choice(classes, size=min(p, classes.size), replace=False)

    out_idx, out_lab = [], []
    for c in np.sort(chosen):
        members = indices[labels == c]
        pick = rng.choice(members, size=k, replace=members.size < k)
        out_idx.extend(pick.tolist())
        out_lab.extend([int(c)] * k)
    return np.asarray(out_idx, dtype=np.int64), np.asarray(out_lab, dtype=np.int64)


def sample_triplet_batch(labeled_idx, labeled_labels, instance_idx, p: int, k: int,
                         max_outliers: int, rng: np.random.Generator) -> TripletBatch:
    """P x K labeled rows plus up to ``max_outliers`` instance rows"""
    idx, lab = sample_pk(labeled_idx, labeled_labels, p, k, rng)
    instance_idx = np.asarray(instance_idx, dtype=np.int64)
    n_out = min(max_outliers, instance_idx.size)
    outliers = np.sort(rng.choice(instance_idx, size=n_out, replace=False)) if n_out else np.zeros(0, dtype=np.int64)
    return TripletBatch(indices=idx, labels=lab, outlier_indices=outliers)


@dataclass
class TrainingPartition:
    """Reliable samples (with labels), RSS-rejected samples and cluster outliers"""
    reliable_idx: np.ndarray
    reliable_labels: np.ndarray
    rejected_idx: np.ndarray
    outlier_idx: np.ndarray

    def check_coverage(self, n: int) -> 'TrainingPartition':
        """Raise unless the three sets are pairwise disjoint and cover 0..n-1"""
        parts = [self.reliable_idx, self.rejected_idx, self.outlier_idx]
        joined = np.concatenate(parts)
        if joined.size != n or not np.array_equal(np.sort(joined), np.arange(n)):
            raise DomainError(
                f"partition does not cover {n} samples exactly once "
                f"(reliable={self.reliable_idx.size}, rejected={self.rejected_idx.size}, "
                f"outliers={self.outlier_idx.size})"
            )
        return self

    def counts(self) -> Dict[str, int]:
        return {
            'reliable': int(self.reliable_idx.size),
            'rejected': int(self.rejected_idx.size),
            'outliers': int(self.outlier_idx.size),
        }


def main_partition(assignment: ClusterAssignment, verdict=None) -> TrainingPartition:
    """
    Split target samples for main-model training

    Args:
        assignment: Current clustering
        verdict: ReliableVerdict of the round, or None to trust every clustered sample

    Returns:
        TrainingPartition
    """
    if verdict is None:
        reliable = assignment.clustered
        rejected = np.zeros(0, dtype=np.int64)
    else:
        reliable = np.asarray(verdict.reliable, dtype=np.int64)
        rejected = np.asarray(verdict.rejected, dtype=np.int64)
    return TrainingPartition(
        reliable_idx=reliable,
        reliable_labels=assignment.labels[reliable],
        rejected_idx=rejected,
        outlier_idx=assignment.outliers,
    )


def apply_outlier_mode(partition: TrainingPartition, mode: str,
                       embeddings: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Decide how unlabeled samples (rejected + outliers) enter training

    Args:
        partition: Current partition
        mode: 'instance' (own class, variant positive), 'discard' (unused) or
              'near' (label of the nearest reliable sample)
        embeddings: Needed by 'near'

    Returns:
        (labeled indices, labels, instance indices)
    """
    unlabeled = np.sort(np.concatenate([partition.rejected_idx, partition.outlier_idx]))
    labeled, labels = partition.reliable_idx, partition.reliable_labels

    if mode == 'instance':
        return labeled, labels, unlabeled
    if mode == 'discard':
        return labeled, labels, np.zeros(0, dtype=np.int64)
    if mode == 'near':
        if embeddings is None:
            raise DomainError("nearest-neighbor labelling needs embeddings")
        if labeled.size == 0 or unlabeled.size == 0:
            return labeled, labels, np.zeros(0, dtype=np.int64)
        diff = embeddings[unlabeled][:, None, :] - embeddings[labeled][None, :, :]
        nearest = np.argmin(np.sum(diff * diff, axis=2), axis=1)
        return (np.concatenate([labeled, unlabeled]),
                np.concatenate([labels, labels[nearest]]),
                np.zeros(0, dtype=np.int64))
    raise DomainError(f"unknown outlier mode '{mode}'")


@dataclass
class MainConfig:
    """Knobs of main-model epochs"""
    lr: float = 0.00035
    margin: float = 0.3
    p_identities: int = 8
    k_instances: int = 4
    max_outliers: int = 8
    variant_sigma: float = 0.1
    outlier_mode: str = 'instance'
    seed: int = 0

    @classmethod
    def from_pipeline(cls, cfg: PipelineConfig, **overrides) -> 'MainConfig':
        values = dict(
            lr=cfg.lr, margin=cfg.margin, p_identities=cfg.p_identities,
            k_instances=cfg.k_instances, max_outliers=cfg.max_outliers,
            variant_sigma=cfg.variant_sigma, outlier_mode=cfg.outlier_mode, seed=cfg.seed,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class MainModel:
    """Encoder plus a classifier head sized to the current cluster count"""
    encoder: DenseNet
    classifier: DenseNet
    lr: float = 0.00035
    state: Optional[AdamState] = None

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params(), lr=self.lr)

    def params(self) -> List[np.ndarray]:
        return concat_params(self.encoder, self.classifier)

    @property
    def n_classes(self) -> int:
        return self.classifier.output_dim

    def ensure_classes(self, n_classes: int, rng: np.random.Generator) -> bool:
        """Rebuild the head (and optimizer state) when the cluster count changed"""
        n_classes = max(n_classes, 1)
        if n_classes == self.n_classes:
            return False
        self.classifier = build_classifier(self.encoder.output_dim, n_classes, rng)
        self.state = AdamState.for_params(self.params(), lr=self.lr)
        logger.info(f"Classifier head rebuilt for {n_classes} clusters")
        return True

    def to_dict(self) -> Dict:
        return {'encoder': self.encoder.to_dict(), 'classifier': self.classifier.to_dict(), 'lr': self.lr}

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> 'MainModel':
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
        return cls(
            encoder=DenseNet.from_dict(payload['encoder']),
            classifier=DenseNet.from_dict(payload['classifier']),
            lr=payload.get('lr', 0.00035),
        )


def main_epoch(model: MainModel, partition: TrainingPartition, raw: np.ndarray, cfg: MainConfig,
               epoch: int, embeddings: Optional[np.ndarray] = None) -> Dict:
    """
    One epoch of L_ce + L_triplet on the current partition

    Args:
        model: Main model, updated in place
        partition: Reliable / rejected / outlier split of the target samples
        raw: (N_T, raw_dim) target inputs
        cfg: Main-model configuration
        epoch: Epoch number (seeds batch sampling and variants)
        embeddings: Current embeddings, used by the 'near' outlier mode

    Returns:
        Trace row with mean losses and loss-attribution counts
    """
    labeled, labels, instances = apply_outlier_mode(partition, cfg.outlier_mode, embeddings)
    row = {'epoch': epoch, 'l_ce': 0.0, 'l_triplet': 0.0, 'l_total': 0.0,
           'n_ce_rows': 0, 'n_outlier_anchors': 0, 'skipped': False}
    if labeled.size == 0:
        logger.warning(f"Main epoch {epoch}: no reliable samples, skipping")
        row['skipped'] = True
        return row

    rng = component_rng(cfg.seed, f'main-epoch-{epoch}')
    n_iter = max(1, math.ceil(labeled.size / (cfg.p_identities * cfg.k_instances)))
    for _ in range(n_iter):
        batch = sample_triplet_batch(labeled, labels, instances, cfg.p_identities,
                                     cfg.k_instances, cfg.max_outliers, rng)
        x_lab = raw[batch.indices]
        x_out = raw[batch.outlier_indices]
        x_var = make_variant(x_out, cfg.variant_sigma, rng)
        n_lab, n_out = x_lab.shape[0], x_out.shape[0]

        emb, cache = model.encoder.forward(np.vstack([x_lab, x_out, x_var]))
        feats = emb[:n_lab + n_out]
        variants = emb[n_lab + n_out:]
        logits, cache_c = model.classifier.forward(feats[:n_lab])

        trip_labels = np.concatenate([batch.labels, np.full(n_out, OUTLIER, dtype=np.int64)])
        loss = main_model_loss(logits, feats, trip_labels, variants, cfg.margin)

        tape_c = model.classifier.backward(cache_c, loss.grad_logits)
        d_emb = np.vstack([loss.grad_features, loss.grad_variants])
        d_emb[:n_lab] += tape_c.inputs
        tape = model.encoder.backward(cache, d_emb)
        adam_step(model.params(), tape.params() + tape_c.params(), model.state)

        row['l_ce'] += loss.l_ce / n_iter
        row['l_triplet'] += loss.l_triplet / n_iter
        row['n_ce_rows'] += n_lab
        row['n_outlier_anchors'] += n_out

    row['l_total'] = row['l_ce'] + row['l_triplet']
    logger.info(
        f"Main epoch {epoch}: L_ce={row['l_ce']:.4f} L_triplet={row['l_triplet']:.4f} "
        f"({labeled.size} labeled, {instances.size} instance samples)"
    )
    return row
