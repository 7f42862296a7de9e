"""
Reliable Sample Selection
An auxiliary model bootstraps from clean samples, corrects noisy pseudo-labels
by joint network/label optimization, and filters the reliable samples
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .clusterer import OUTLIER, ClusterAssignment
from .config import DEFAULT_LABEL_LR, PipelineConfig, component_rng
from .core_math import entropy_rows, l2_normalize, log_softmax, mat64, softmax
from .dense_net import DenseNet, Layer, adam_step
from .errors import ConfigError, DomainError
from .fda import source_ce_loss_grad
from .trainer import MainModel, batch_hard_triplet_loss_grad, sample_pk

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['round', 'stage', 'epoch', 'l_ce', 'l_triplet', 'l_kl', 'l_c', 'l_e',
                 'n_labeled', 'label_entropy']
VERDICT_COLUMNS = ['index', 'y_c', 'y_n', 'kept']


@dataclass
class SoftLabelMatrix:
    """Per-sample label logits over the current pseudo-classes"""
    logits: np.ndarray
    indices: np.ndarray
    label_lr: float

    def __post_init__(self):
        self.logits = mat64(self.logits)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.logits.shape[0] != self.indices.shape[0]:
            raise DomainError(f"{self.logits.shape[0]} label rows for {self.indices.shape[0]} samples")

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def mean_entropy(self) -> float:
        if self.logits.shape[0] == 0:
            return 0.0
        return float(entropy_rows(self.probs).mean())


@dataclass
class SampleSplit:
    """Labeled set S_l (indices + hard labels) and unlabeled set S_u"""
    labeled_idx: np.ndarray
    labeled_labels: np.ndarray
    unlabeled_idx: np.ndarray

    def __post_init__(self):
        self.labeled_idx = np.asarray(self.labeled_idx, dtype=np.int64)
        self.labeled_labels = np.asarray(self.labeled_labels, dtype=np.int64)
        self.unlabeled_idx = np.asarray(self.unlabeled_idx, dtype=np.int64)
        if np.intersect1d(self.labeled_idx, self.unlabeled_idx).size:
            raise DomainError("labeled and unlabeled sets overlap")

    @property
    def n_labeled(self) -> int:
        return self.labeled_idx.size


@dataclass
class ReliableVerdict:
    """Corrected label Y^n per sample and whether it agrees with the pseudo-label Y^c"""
    indices: np.ndarray
    y_c: np.ndarray
    y_n: np.ndarray
    kept: np.ndarray

    @property
    def reliable(self) -> np.ndarray:
        return self.indices[self.kept]

    @property
    def rejected(self) -> np.ndarray:
        """Samples routed to instance-level training"""
        return self.indices[~self.kept]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'index': self.indices, 'y_c': self.y_c, 'y_n': self.y_n, 'kept': self.kept.astype(int)
        })[VERDICT_COLUMNS]


def save_verdict(verdict: ReliableVerdict, path: str):
    verdict.to_frame().to_csv(path, index=False)
    logger.info(f"✅ Verdict exported to {path} ({int(verdict.kept.sum())} kept, "
                f"{int((~verdict.kept).sum())} rejected)")


def load_verdict(path: str) -> ReliableVerdict:
    frame = pd.read_csv(path)
    missing = [c for c in VERDICT_COLUMNS if c not in frame.columns]
    if missing:
        raise ConfigError(f"verdict file {path} lacks columns {missing}")
    return ReliableVerdict(
        indices=frame['index'].to_numpy(dtype=np.int64),
        y_c=frame['y_c'].to_numpy(dtype=np.int64),
        y_n=frame['y_n'].to_numpy(dtype=np.int64),
        kept=frame['kept'].to_numpy().astype(bool),
    )


@dataclass
class RSSConfig:
    """Knobs of one reliable-sample-selection round"""
    k: int = 12
    confidence: float = 0.9
    mu: float = 10.0
    lambda_c: float = 0.1
    lambda_e: float = 0.1
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    lr: float = 0.00035
    label_lr: float = DEFAULT_LABEL_LR
    aux_temperature: float = 0.05
    reverse_kl: bool = False
    margin: float = 0.3
    p_identities: int = 8
    k_instances: int = 4
    batch_size: int = 64
    reliable_mode: str = 'rss'
    seed: int = 0

    @classmethod
    def from_pipeline(cls, cfg: PipelineConfig, **overrides) -> 'RSSConfig':
        values = dict(
            k=cfg.k, confidence=cfg.confidence, mu=cfg.mu, lambda_c=cfg.lambda_c,
            lambda_e=cfg.lambda_e, stage1_epochs=cfg.stage1_epochs, stage2_epochs=cfg.stage2_epochs,
            lr=cfg.lr, label_lr=cfg.label_learning_rate, aux_temperature=cfg.aux_temperature,
            reverse_kl=cfg.reverse_kl, margin=cfg.margin, p_identities=cfg.p_identities, k_instances=cfg.k_instances,
            batch_size=cfg.batch_size, reliable_mode=cfg.reliable_mode, seed=cfg.seed,
        )
        values.update(overrides)
        return cls(**values)


def prototype_classifier(encoder: DenseNet, raw: np.ndarray, assignment: ClusterAssignment,
                         temperature: float) -> DenseNet:
    """
    Linear head whose class weights are the normalized cluster centroids

    Weights are scaled so that a feature at the median norm gets logits
    cos(f, c_k) / temperature.

    Args:
        encoder: Encoder whose features the head reads
        raw: (N_T, raw_dim) target inputs
        assignment: Current clustering, at least one cluster
        temperature: Softmax temperature at the median feature norm, > 0

    Returns:
        Single-layer DenseNet with one output per cluster
    """
    if temperature <= 0:
        raise ConfigError("must be > 0", field='aux_temperature')
    if assignment.n_clusters == 0:
        raise DomainError("no clusters to build a prototype head from")
    idx = assignment.clustered
    feats = encoder.predict(raw[idx])
    centres = np.zeros((assignment.n_clusters, feats.shape[1]))
    np.add.at(centres, assignment.labels[idx], l2_normalize(feats))
    scale = 1.0 / (temperature * float(np.median(np.linalg.norm(feats, axis=1))))
    norms = np.linalg.norm(centres, axis=1, keepdims=True)
    # a cluster emptied by label corruption keeps a zero row
    centres = np.divide(centres, norms, out=np.zeros_like(centres), where=norms > 0)
    return DenseNet([Layer(scale * centres.T, np.zeros(assignment.n_clusters), 'identity')])


def init_clean_set(embeddings: np.ndarray, assignment: ClusterAssignment, k: int) -> SampleSplit:
    """
    Seed the labeled set with the k members nearest to every cluster centre

    Args:
        embeddings: (N, d) features aligned with the assignment
        assignment: Current clustering
        k: Clean samples per cluster, >= 1

    Returns:
        SampleSplit; clusters smaller than k contribute every member
    """
    if k < 1:
        raise ConfigError("must be >= 1", field='k')
    if assignment.n_clusters == 0:
        raise DomainError("no clusters to select clean samples from")
    embeddings = mat64(embeddings)

    labeled, labels = [], []
    for c in range(assignment.n_clusters):
        members = assignment.members(c)
        if members.size == 0:
            continue
        centre = embeddings[members].mean(axis=0)
        dist = np.linalg.norm(embeddings[members] - centre, axis=1)
        chosen = np.sort(members[np.argsort(dist, kind='stable')[:k]])
        labeled.extend(chosen.tolist())
        labels.extend([c] * chosen.size)

    labeled = np.asarray(labeled, dtype=np.int64)
    unlabeled = np.setdiff1d(assignment.clustered, labeled)
    return SampleSplit(labeled, np.asarray(labels, dtype=np.int64), unlabeled)


def entropy_loss_grad(logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean row entropy of softmax(logits) and its gradient w.r.t. the logits"""
    z = softmax(logits, axis=1)
    log_z = log_softmax(logits, axis=1)
    n = logits.shape[0]
    h = -np.sum(z * log_z, axis=1, keepdims=True)
    return float(h.mean()), -z * (log_z + h) / n


def stage1_epoch(aux: MainModel, split: SampleSplit, raw: np.ndarray, cfg: RSSConfig,
                 rng: np.random.Generator) -> Tuple[SampleSplit, Dict]:
    """
    One bootstrap epoch of the auxiliary model

    S_l batches train with cross-entropy + batch-hard triplet on their
    pseudo-labels, S_u batches with the entropy loss. Afterwards every S_u
    sample whose top class probability exceeds the confidence threshold moves
    to S_l with its argmax as label.

    Args:
        aux: Auxiliary encoder + classifier, updated in place
        split: Current labeled / unlabeled split
        raw: (N_T, raw_dim) target inputs
        cfg: Round configuration
        rng: Batch sampling stream

    Returns:
        (new split, stats)
    """
    if split.n_labeled == 0:
        raise DomainError("cannot bootstrap from an empty labeled set")
    if not 0.0 < cfg.confidence <= 1.0:
        raise ConfigError("must lie in (0, 1]", field='confidence')

    n_iter = max(1, math.ceil(split.n_labeled / (cfg.p_identities * cfg.k_instances)))
    perm_u = rng.permutation(split.unlabeled_idx)
    stats = {'l_ce': 0.0, 'l_triplet': 0.0, 'l_e': 0.0}

    for it in range(n_iter):
        idx, labels = sample_pk(split.labeled_idx, split.labeled_labels,
                                cfg.p_identities, cfg.k_instances, rng)
        emb, cache = aux.encoder.forward(raw[idx])
        logits, cache_c = aux.classifier.forward(emb)
        l_ce, d_logits = source_ce_loss_grad(logits, labels)
        trip = batch_hard_triplet_loss_grad(emb, labels, None, cfg.margin)
        tape_c = aux.classifier.backward(cache_c, d_logits)
        tape = aux.encoder.backward(cache, tape_c.inputs + trip.grad_features)

        if perm_u.size:
            u_idx = np.take(perm_u, np.arange(it * cfg.batch_size, (it + 1) * cfg.batch_size), mode='wrap')
            u_idx = np.unique(u_idx)
            emb_u, cache_u = aux.encoder.forward(raw[u_idx])
            logits_u, cache_cu = aux.classifier.forward(emb_u)
            l_e, d_logits_u = entropy_loss_grad(logits_u)
            tape_cu = aux.classifier.backward(cache_cu, d_logits_u)
            tape = tape + aux.encoder.backward(cache_u, tape_cu.inputs)
            tape_c = tape_c + tape_cu
            stats['l_e'] += l_e / n_iter

        adam_step(aux.params(), tape.params() + tape_c.params(), aux.state)
        stats['l_ce'] += l_ce / n_iter
        stats['l_triplet'] += trip.loss / n_iter

    if split.unlabeled_idx.size:
        probs = softmax(aux.classifier.predict(aux.encoder.predict(raw[split.unlabeled_idx])), axis=1)
        confident = probs.max(axis=1) > cfg.confidence
        moved = split.unlabeled_idx[confident]
        split = SampleSplit(
            labeled_idx=np.concatenate([split.labeled_idx, moved]),
            labeled_labels=np.concatenate([split.labeled_labels, probs[confident].argmax(axis=1)]),
            unlabeled_idx=split.unlabeled_idx[~confident],
        )
        logger.debug(f"Stage 1: {moved.size} samples migrated to the labeled set")

    stats['n_labeled'] = split.n_labeled
    return split, stats


def init_soft_labels(assignment: ClusterAssignment, mu: float, label_lr: float = 0.0) -> SoftLabelMatrix:
    """
    Soft labels softmax(mu * onehot(Y^c)) for every clustered sample

    Args:
        assignment: Current clustering; outliers are not included
        mu: Label softening constant, > 0
        label_lr: Step size for the label logits

    Returns:
        SoftLabelMatrix
    """
    if mu <= 0:
        raise ConfigError("must be > 0", field='mu')
    indices = assignment.clustered
    logits = np.zeros((indices.size, max(assignment.n_clusters, 1)))
    logits[np.arange(indices.size), assignment.labels[indices]] = mu
    return SoftLabelMatrix(logits=logits, indices=indices, label_lr=label_lr)


@dataclass
class RSSLosses:
    """Stage-2 loss terms and gradients w.r.t. classifier and label logits"""
    l_kl: float
    l_c: float
    l_e: float
    total: float
    grad_class_logits: np.ndarray
    grad_label_logits: np.ndarray


def rss_losses(class_logits: np.ndarray, label_logits: np.ndarray, hard_labels,
               lambda_c: float, lambda_e: float, reverse_kl: bool = False) -> RSSLosses:
    """
    L_RSS = L_kl + lambda_c * L_c + lambda_e * L_e, averaged over rows

    With z = softmax(class_logits) and y = softmax(label_logits):
    L_kl = sum z log(z / y) (or sum y log(y / z) with ``reverse_kl``),
    L_c = -sum onehot(hard) log y, L_e = -sum z log z.

    Args:
        class_logits: (n, c) classifier outputs
        label_logits: (n, c) soft-label logits
        hard_labels: Pseudo-label per row
        lambda_c: Weight of the label-compatibility term
        lambda_e: Weight of the entropy term
        reverse_kl: Use KL(y || z) instead of KL(z || y)

    Returns:
        RSSLosses
    """
    a = mat64(class_logits)
    b = mat64(label_logits)
    if a.shape != b.shape:
        raise DomainError(f"classifier logits {a.shape} and label logits {b.shape} differ")
    hard = np.asarray(hard_labels, dtype=np.int64)
    n, c = a.shape
    if hard.shape != (n,) or (n and (hard.min() < 0 or hard.max() >= c)):
        raise DomainError("hard labels must lie in [0, c)")

    z, log_z = softmax(a, axis=1), log_softmax(a, axis=1)
    y, log_y = softmax(b, axis=1), log_softmax(b, axis=1)
    onehot = np.zeros_like(y)
    onehot[np.arange(n), hard] = 1.0

    if reverse_kl:
        gap = log_y - log_z
        kl = np.sum(y * gap, axis=1, keepdims=True)
        d_a_kl = (z - y) / n
        d_b_kl = y * (gap - kl) / n
    else:
        gap = log_z - log_y
        kl = np.sum(z * gap, axis=1, keepdims=True)
        d_a_kl = z * (gap - kl) / n
        d_b_kl = (y - z) / n

    l_c = -np.sum(onehot * log_y, axis=1)
    d_b_c = (y - onehot) / n
    h = -np.sum(z * log_z, axis=1, keepdims=True)
    d_a_e = -z * (log_z + h) / n

    l_kl, l_c, l_e = float(kl.mean()), float(l_c.mean()), float(h.mean())
    return RSSLosses(
        l_kl=l_kl, l_c=l_c, l_e=l_e,
        total=l_kl + lambda_c * l_c + lambda_e * l_e,
        grad_class_logits=d_a_kl + lambda_e * d_a_e,
        grad_label_logits=d_b_kl + lambda_c * d_b_c,
    )


def stage2_epoch(aux: MainModel, soft: SoftLabelMatrix, hard_labels, raw: np.ndarray,
                 cfg: RSSConfig, rng: np.random.Generator) -> Dict:
    """
    One joint epoch over all clustered samples

    Network parameters take an Adam step on L_RSS; each label-logit row
    takes a plain gradient step of its own per-sample loss at ``soft.label_lr``.

    Args:
        aux: Auxiliary model, updated in place
        soft: Soft labels, updated in place
        hard_labels: Pseudo-label of every row of ``soft``
        raw: (N_T, raw_dim) target inputs
        cfg: Round configuration
        rng: Batch order stream

    Returns:
        Mean loss terms of the epoch
    """
    hard_labels = np.asarray(hard_labels, dtype=np.int64)
    n_rows = soft.indices.size
    stats = {'l_kl': 0.0, 'l_c': 0.0, 'l_e': 0.0}
    if n_rows == 0:
        return stats

    order = rng.permutation(n_rows)
    n_iter = math.ceil(n_rows / cfg.batch_size)
    for it in range(n_iter):
        rows = order[it * cfg.batch_size:(it + 1) * cfg.batch_size]
        emb, cache = aux.encoder.forward(raw[soft.indices[rows]])
        logits, cache_c = aux.classifier.forward(emb)
        losses = rss_losses(logits, soft.logits[rows], hard_labels[rows],
                            cfg.lambda_c, cfg.lambda_e, cfg.reverse_kl)

        tape_c = aux.classifier.backward(cache_c, losses.grad_class_logits)
        tape = aux.encoder.backward(cache, tape_c.inputs)
        adam_step(aux.params(), tape.params() + tape_c.params(), aux.state)
        # rows are independent, so undo the batch mean to get per-sample gradients
        soft.logits[rows] -= soft.label_lr * rows.size * losses.grad_label_logits

        stats['l_kl'] += losses.l_kl / n_iter
        stats['l_c'] += losses.l_c / n_iter
        stats['l_e'] += losses.l_e / n_iter
    return stats


def filter_reliable(soft: SoftLabelMatrix, hard_labels) -> ReliableVerdict:
    """
    Keep the samples whose corrected label argmax(y) equals the pseudo-label

    Ties keep the sample when its pseudo-label is among the tied maxima.

    Args:
        soft: Soft labels after stage 2
        hard_labels: Pseudo-label Y^c per row of ``soft``

    Returns:
        ReliableVerdict
    """
    y_c = np.asarray(hard_labels, dtype=np.int64)
    probs = soft.probs
    y_n = probs.argmax(axis=1) if probs.shape[0] else np.zeros(0, dtype=np.int64)
    kept = y_n == y_c

    if probs.shape[0]:
        at_max = probs == probs.max(axis=1, keepdims=True)
        for r in np.flatnonzero(at_max.sum(axis=1) > 1):
            if at_max[r, y_c[r]]:
                y_n[r] = y_c[r]
                kept[r] = True
            logger.warning(f"Soft-label tie for sample {soft.indices[r]}; "
                           f"{'kept' if kept[r] else 'rejected'}")

    return ReliableVerdict(indices=soft.indices.copy(), y_c=y_c, y_n=y_n, kept=kept)


def corrupt_labels(labels, rate: float, n_clusters: int,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flip a fraction of the non-outlier pseudo-labels to a different cluster

    Args:
        labels: Pseudo-labels (OUTLIER entries are never touched)
        rate: Fraction in [0, 1] of clustered samples to flip
        n_clusters: Number of clusters
        rng: Corruption stream

    Returns:
        (corrupted labels, flipped mask)
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("must lie in [0, 1]", field='corruption_rate')
    labels = np.asarray(labels, dtype=np.int64).copy()
    flipped = np.zeros(labels.shape[0], dtype=bool)
    clustered = np.flatnonzero(labels != OUTLIER)
    n_flip = int(round(rate * clustered.size))
    if n_flip == 0:
        return labels, flipped
    if n_clusters < 2:
        logger.warning("Label corruption needs at least two clusters; nothing flipped")
        return labels, flipped

    for i in np.sort(rng.choice(clustered, size=n_flip, replace=False)):
        shift = int(rng.integers(1, n_clusters))
        labels[i] = (labels[i] + shift) % n_clusters
        flipped[i] = True
    logger.info(f"Corrupted {n_flip} of {clustered.size} pseudo-labels")
    return labels, flipped


@dataclass
class RSSRoundResult:
    """Outcome of one selection round"""
    verdict: ReliableVerdict
    soft: Optional[SoftLabelMatrix] = None
    trace: List[Dict] = field(default_factory=list)


def _trace_row(round_index: int, stage: int, epoch: int, **values) -> Dict:
    row = {col: None for col in TRACE_COLUMNS}
    row.update(round=round_index, stage=stage, epoch=epoch, **values)
    return row


def _keep_all(assignment: ClusterAssignment) -> ReliableVerdict:
    idx = assignment.clustered
    labels = assignment.labels[idx]
    return ReliableVerdict(indices=idx, y_c=labels, y_n=labels.copy(), kept=np.ones(idx.size, dtype=bool))


def run_rss_round(main_encoder: DenseNet, assignment: ClusterAssignment, raw: np.ndarray,
                  embeddings: np.ndarray, cfg: RSSConfig, round_index: int = 0) -> RSSRoundResult:
    """
    Full selection round: clean-set bootstrap, joint label correction, filtering

    The auxiliary model starts from a copy of the main encoder with a
    prototype head built from the current clusters; the main model is
    not touched.

    Args:
        main_encoder: Current main-model encoder
        assignment: Current clustering (possibly corrupted pseudo-labels)
        raw: (N_T, raw_dim) target inputs
        embeddings: (N_T, d) features the clustering was computed on
        cfg: Round configuration
        round_index: Round number, part of every stream name

    Returns:
        RSSRoundResult with the verdict, the final soft labels and the stage traces
    """
    if assignment.n_clusters == 0:
        logger.warning(f"RSS round {round_index}: no clusters, every sample is an outlier")
        return RSSRoundResult(verdict=_keep_all(assignment))

    if cfg.reliable_mode == 'none':
        return RSSRoundResult(verdict=_keep_all(assignment))
    if cfg.reliable_mode == 'distance':
        split = init_clean_set(embeddings, assignment, cfg.k)
        idx = assignment.clustered
        kept = np.isin(idx, split.labeled_idx)
        labels = assignment.labels[idx]
        return RSSRoundResult(verdict=ReliableVerdict(
            indices=idx, y_c=labels, y_n=np.where(kept, labels, OUTLIER), kept=kept))
    if cfg.reliable_mode != 'rss':
        raise ConfigError(f"unknown mode '{cfg.reliable_mode}'", field='reliable_mode')

    rng = component_rng(cfg.seed, f'rss-{round_index}')
    aux = MainModel(
        encoder=main_encoder.copy(),
        classifier=prototype_classifier(main_encoder, raw, assignment, cfg.aux_temperature),
        lr=cfg.lr,
    )
    result = RSSRoundResult(verdict=None)

    split = init_clean_set(embeddings, assignment, cfg.k)
    logger.info(f"RSS round {round_index}: {split.n_labeled} clean samples, "
                f"{split.unlabeled_idx.size} unlabeled")
    for epoch in range(1, cfg.stage1_epochs + 1):
        split, stats = stage1_epoch(aux, split, raw, cfg, rng)
        result.trace.append(_trace_row(round_index, 1, epoch, **stats))
        logger.info(f"RSS stage 1 epoch {epoch}/{cfg.stage1_epochs}: |S_l|={split.n_labeled} "
                    f"L_ce={stats['l_ce']:.4f} L_e={stats['l_e']:.4f}")

    soft = init_soft_labels(assignment, cfg.mu, cfg.label_lr)
    hard = assignment.labels[soft.indices]
    for epoch in range(1, cfg.stage2_epochs + 1):
        stats = stage2_epoch(aux, soft, hard, raw, cfg, rng)
        result.trace.append(_trace_row(round_index, 2, epoch, label_entropy=soft.mean_entropy(), **stats))
        logger.info(f"RSS stage 2 epoch {epoch}/{cfg.stage2_epochs}: L_kl={stats['l_kl']:.4f} "
                    f"L_c={stats['l_c']:.4f} L_e={stats['l_e']:.4f}")

    result.soft = soft
    result.verdict = filter_reliable(soft, hard)
    logger.info(f"✅ RSS round {round_index}: {result.verdict.reliable.size} reliable, "
                f"{result.verdict.rejected.size} rejected")
    return result


def save_trace(rows: List[Dict], path: str):
    pd.DataFrame(rows, columns=TRACE_COLUMNS).to_csv(path, index=False)
