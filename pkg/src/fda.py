"""
Feature Distribution Alignment
Trains the shared encoder with source cross-entropy, camera-aware contrastive
learning against a memory bank, and least-squares adversarial alignment
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from .config import PipelineConfig, component_rng
from .core_math import l2_normalize, log_softmax, mat64, normalize_backward, softmax
from .dense_net import (
    AdamState, DenseNet, GradTape, adam_step, build_classifier, concat_params
)
from .errors import ConfigError, DomainError
from .synth_world import Dataset, make_variant

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['epoch', 'l_ce', 'l_cl', 'l_g', 'l_d']


class MemoryBank:
    """One unit-norm feature cell per target sample, updated by exponential moving average"""

    def __init__(self, features: np.ndarray, alpha: float = 0.2):
        """
        Initialize the bank

        Args:
            features: (N_T, d) initial cells; stored L2-normalized
            alpha: Share of the old cell kept on every update, in [0, 1]
        """
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("must lie in [0, 1]", field='alpha')
        self.features = l2_normalize(mat64(features))
        self.alpha = float(alpha)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def update(self, index: int, new_feature: np.ndarray) -> bool:
        """
        cell <- alpha * cell + (1 - alpha) * new_feature, then renormalized

        Args:
            index: Cell to update
            new_feature: Incoming feature of length dim

        Returns:
            False when the mix has zero norm and the old cell was kept
        """
        if not 0 <= index < len(self):
            raise DomainError(f"bank index {index} out of range [0, {len(self)})")
        new_feature = np.asarray(new_feature, dtype=np.float64)
        if new_feature.shape != (self.dim,):
            raise DomainError(f"feature shape {new_feature.shape} != ({self.dim},)")

        mixed = self.alpha * self.features[index] + (1.0 - self.alpha) * new_feature
        norm = np.linalg.norm(mixed)
        if norm == 0.0 or not np.isfinite(norm):
            logger.warning(f"Memory cell {index} update has zero norm; keeping previous cell")
            return False
        self.features[index] = mixed / norm
        return True

    def update_batch(self, indices, new_features: np.ndarray):
        for idx, feat in zip(indices, new_features):
            self.update(int(idx), feat)

    def to_dict(self) -> Dict:
        return {
            'alpha': self.alpha,
            'n_cells': len(self),
            'dim': self.dim,
            'cells': self.features.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'MemoryBank':
        cells = np.asarray(payload['cells'], dtype=np.float64).reshape(payload['n_cells'], payload['dim'])
        return cls(cells, payload['alpha'])

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> 'MemoryBank':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def bank_update(bank: MemoryBank, index: int, new_feature: np.ndarray, alpha: Optional[float] = None) -> bool:
    """Single-cell update with an explicit rate (defaults to the bank's own)"""
    if alpha is not None and alpha != bank.alpha:
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("must lie in [0, 1]", field='alpha')
        saved, bank.alpha = bank.alpha, float(alpha)
        try:
            return bank.update(index, new_feature)
        finally:
            bank.alpha = saved
    return bank.update(index, new_feature)


@dataclass
class NeighborSets:
    """Per-sample intra-camera (C_i) and cross-camera (C_o) neighbor lists"""
    intra: List[np.ndarray]
    cross: List[np.ndarray]

    def support(self, i: int) -> np.ndarray:
        return np.concatenate([self.intra[i], self.cross[i]])


@dataclass
class SimilarityTargets:
    """Sparse N_T x N_T soft-target weights s_ij"""
    matrix: sparse.csr_matrix

    def rows(self, indices) -> np.ndarray:
        return self.matrix[np.asarray(indices)].toarray()


def build_neighbor_sets(embeddings: np.ndarray, bank: MemoryBank, cameras, r1: int, r2: int) -> NeighborSets:
    """
    Camera-aware nearest neighbors of every sample among the bank cells

    Args:
        embeddings: (N_T, d) current target features
        bank: Memory bank with N_T cells
        cameras: Camera id per target sample
        r1: Intra-camera neighbors kept
        r2: Cross-camera neighbors kept

    Returns:
        NeighborSets; ties in similarity go to the lower index
    """
    if r1 < 0 or r2 < 0:
        raise ConfigError("neighbor counts must be >= 0", field='r1' if r1 < 0 else 'r2')
    embeddings = mat64(embeddings)
    cameras = np.asarray(cameras)
    if embeddings.shape[0] != len(bank) or cameras.shape[0] != len(bank):
        raise DomainError(
            f"{embeddings.shape[0]} embeddings / {cameras.shape[0]} cameras for a bank of {len(bank)}"
        )

    sims = l2_normalize(embeddings) @ bank.features.T
    n = len(bank)
    all_idx = np.arange(n)
    intra, cross = [], []
    for i in range(n):
        same = cameras == cameras[i]
        same[i] = False
        other = cameras != cameras[i]
        for mask, r, out in ((same, r1, intra), (other, r2, cross)):
            candidates = all_idx[mask]
            order = np.argsort(-sims[i, candidates], kind='stable')
            out.append(candidates[order[:r]])
    return NeighborSets(intra=intra, cross=cross)


def similarity_targets(embeddings: np.ndarray, bank: MemoryBank, sets: NeighborSets,
                       renormalize: bool = False) -> SimilarityTargets:
    """
    Soft targets: 1 on the diagonal, cosine(f_i, bank_j) on neighbors, 0 elsewhere

    Args:
        embeddings: (N_T, d) target features
        bank: Memory bank
        sets: Neighbor sets of every sample
        renormalize: Scale each row to sum to one

    Returns:
        SimilarityTargets (constants: no gradient flows through them)
    """
    unit = l2_normalize(mat64(embeddings))
    n = len(bank)
    rows, cols, vals = [], [], []
    for i in range(n):
        support = sets.support(i)
        row_vals = [1.0] + list(unit[i] @ bank.features[support].T) if len(support) else [1.0]
        row_cols = [i] + support.tolist()
        if renormalize:
            total = float(np.sum(row_vals))
            if total != 0.0:
                row_vals = [v / total for v in row_vals]
        rows.extend([i] * len(row_cols))
        cols.extend(row_cols)
        vals.extend(row_vals)
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SimilarityTargets(matrix=matrix)


def contrastive_loss_grad(embeddings: np.ndarray, batch_indices, bank: MemoryBank,
                          targets: SimilarityTargets, tau: float,
                          normalizer: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """
    Memory-bank contrastive loss over the batch rows and its gradient

    loss = -(1/N_T) sum_i sum_j s_ij log softmax_k(f_i . bank_k / tau)[j]
    with f_i the L2-normalized embedding and the softmax over every bank cell.

    Args:
        embeddings: (B, d) raw encoder outputs of the batch
        batch_indices: Target-sample index of each batch row
        bank: Memory bank (constant here)
        targets: Soft targets s
        tau: Temperature in (0, 1)
        normalizer: Divisor of the sum (defaults to N_T)

    Returns:
        (loss, dLoss/dEmbeddings)
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError("must lie in (0, 1)", field='tau')
    embeddings = mat64(embeddings)
    norm = float(len(bank) if normalizer is None else normalizer)

    unit = l2_normalize(embeddings)
    logits = unit @ bank.features.T / tau
    logp = log_softmax(logits, axis=1)
    s = targets.rows(batch_indices)

    loss = float(-np.sum(s * logp) / norm)
    d_logits = (s.sum(axis=1, keepdims=True) * np.exp(logp) - s) / norm
    d_unit = d_logits @ bank.features / tau
    return loss, normalize_backward(embeddings, d_unit)


def source_ce_loss_grad(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy and its gradient w.r.t. the logits

    Args:
        logits: (n, c) class scores
        labels: True class per row

    Returns:
        (loss, dLoss/dLogits)
    """
    logits = mat64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DomainError(f"{labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")

    logp = log_softmax(logits, axis=1)
    loss = float(-np.mean(logp[np.arange(n), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class AdversarialLosses:
    """Generator and discriminator losses with their separately routed gradients"""
    gen_loss: float
    gen_grad: np.ndarray
    disc_loss: float
    disc_tape: GradTape


def adversarial_losses(disc: DenseNet, source_emb: np.ndarray, target_emb: np.ndarray) -> AdversarialLosses:
    """
    Least-squares domain losses

    L_g = mean_t (D(f_t) - 1)^2 drives the encoder on target features;
    L_d = mean_s (D(f_s) - 1)^2 + mean_t D(f_t)^2 drives the discriminator.

    Args:
        disc: Domain discriminator with a scalar output
        source_emb: (n_s, d) source features
        target_emb: (n_t, d) target features

    Returns:
        AdversarialLosses; gen_grad is dL_g/dTargetEmb, disc_tape holds dL_d/dParams
    """
    source_emb = mat64(source_emb)
    target_emb = mat64(target_emb)
    if source_emb.shape[0] == 0 or target_emb.shape[0] == 0:
        raise DomainError("adversarial losses need non-empty source and target batches")
    n_s, n_t = source_emb.shape[0], target_emb.shape[0]

    d_s, cache_s = disc.forward(source_emb)
    d_t, cache_t = disc.forward(target_emb)

    gen_loss = float(np.mean((d_t - 1.0) ** 2))
    gen_grad = disc.backward(cache_t, 2.0 * (d_t - 1.0) / n_t).inputs

    disc_loss = float(np.mean((d_s - 1.0) ** 2) + np.mean(d_t ** 2))
    disc_tape = disc.backward(cache_s, 2.0 * (d_s - 1.0) / n_s) + disc.backward(cache_t, 2.0 * d_t / n_t)

    return AdversarialLosses(gen_loss=gen_loss, gen_grad=gen_grad, disc_loss=disc_loss, disc_tape=disc_tape)


@dataclass
class FDAConfig:
    """Knobs of the alignment stage"""
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.00035
    tau: float = 0.05
    alpha: float = 0.2
    r1: int = 2
    r2: int = 4
    variant_sigma: float = 0.1
    use_contrastive: bool = True
    use_adversarial: bool = True
    refresh_neighbors_per_iteration: bool = False
    renormalize_targets: bool = False
    freeze_variants: bool = False
    seed: int = 0

    @classmethod
    def from_pipeline(cls, cfg: PipelineConfig, **overrides) -> 'FDAConfig':
        values = dict(
            epochs=cfg.fda_epochs, batch_size=cfg.batch_size, lr=cfg.lr, tau=cfg.tau,
            alpha=cfg.alpha, r1=cfg.neighbor_r1, r2=cfg.r2, variant_sigma=cfg.variant_sigma,
            use_contrastive=cfg.use_contrastive, use_adversarial=cfg.use_adversarial,
            refresh_neighbors_per_iteration=cfg.refresh_neighbors_per_iteration,
            renormalize_targets=cfg.renormalize_targets, freeze_variants=cfg.freeze_variants,
            seed=cfg.seed,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class FDAResult:
    """Outcome of an alignment run"""
    encoder: DenseNet
    classifier: DenseNet
    discriminator: DenseNet
    bank: MemoryBank
    trace: List[Dict] = field(default_factory=list)


def _variants(raw: np.ndarray, cfg: FDAConfig, epoch: int) -> np.ndarray:
    tag = 0 if cfg.freeze_variants else epoch
    return make_variant(raw, cfg.variant_sigma, component_rng(cfg.seed, f'fda-variants-{tag}'))


def _targets(encoder: DenseNet, raw: np.ndarray, cameras, bank: MemoryBank, cfg: FDAConfig) -> SimilarityTargets:
    emb = encoder.predict(raw)
    sets = build_neighbor_sets(emb, bank, cameras, cfg.r1, cfg.r2)
    return similarity_targets(emb, bank, sets, renormalize=cfg.renormalize_targets)


def fda_train(encoder: DenseNet, disc: DenseNet, dataset: Dataset, cfg: FDAConfig) -> FDAResult:
    """
    Train the encoder with L_FDA = L_ce + L_g + L_cl (unit weights)

    Every iteration draws a source batch (cross-entropy through a source
    classifier head) and a target batch (contrastive + generator losses),
    steps the encoder, steps the discriminator on L_d, then writes the
    batch's variant features into the memory bank. Neighbor sets are
    rebuilt once per epoch unless per-iteration refresh is enabled.

    Args:
        encoder: Initial encoder (copied, not modified)
        disc: Initial discriminator (copied, not modified)
        dataset: World with labeled source and unlabeled target
        cfg: Stage configuration

    Returns:
        FDAResult with the trained networks, the bank and a per-epoch trace
    """
    source = dataset.source.training_view()
    target = dataset.target.training_view()
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("alignment needs non-empty source and target domains")
    if not 0.0 < cfg.tau < 1.0:
        raise ConfigError("must lie in (0, 1)", field='tau')

    encoder = encoder.copy()
    disc = disc.copy()
    labels = dataset.source_labels
    classifier = build_classifier(encoder.output_dim, dataset.n_source_classes,
                                  component_rng(cfg.seed, 'fda-classifier-init'))
    rng = component_rng(cfg.seed, 'fda')

    variants = _variants(target.raw, cfg, 0)
    bank = MemoryBank(encoder.predict(variants), cfg.alpha)
    result = FDAResult(encoder=encoder, classifier=classifier, discriminator=disc, bank=bank)
    if cfg.epochs == 0:
        return result

    model_params = concat_params(encoder, classifier)
    enc_state = AdamState.for_params(model_params, lr=cfg.lr)
    disc_state = AdamState.for_params(disc.params(), lr=cfg.lr)

    n_t, n_s, b = len(target), len(source), cfg.batch_size
    n_iter = math.ceil(n_t / b)

    for epoch in range(cfg.epochs):
        if epoch > 0 and not cfg.freeze_variants:
            variants = _variants(target.raw, cfg, epoch)
        targets = _targets(encoder, target.raw, target.cameras, bank, cfg) if cfg.use_contrastive else None

        perm_t = rng.permutation(n_t)
        perm_s = rng.permutation(n_s)
        sums = {'l_ce': 0.0, 'l_cl': 0.0, 'l_g': 0.0, 'l_d': 0.0}

        for it in range(n_iter):
            t_idx = perm_t[it * b:(it + 1) * b]
            s_idx = np.take(perm_s, np.arange(it * b, it * b + b), mode='wrap')
            if cfg.use_contrastive and cfg.refresh_neighbors_per_iteration and it > 0:
                targets = _targets(encoder, target.raw, target.cameras, bank, cfg)

            emb_s, cache_s = encoder.forward(source.raw[s_idx])
            logits, cache_c = classifier.forward(emb_s)
            l_ce, d_logits = source_ce_loss_grad(logits, labels[s_idx])
            tape_c = classifier.backward(cache_c, d_logits)

            emb_t, cache_t = encoder.forward(target.raw[t_idx])
            d_emb_t = np.zeros_like(emb_t)
            l_cl = 0.0
            if cfg.use_contrastive:
                l_cl, g_cl = contrastive_loss_grad(emb_t, t_idx, bank, targets, cfg.tau)
                d_emb_t += g_cl

            adv = None
            if cfg.use_adversarial:
                adv = adversarial_losses(disc, emb_s, emb_t)
                d_emb_t += adv.gen_grad

            tape = encoder.backward(cache_s, tape_c.inputs) + encoder.backward(cache_t, d_emb_t)
            adam_step(model_params, tape.params() + tape_c.params(), enc_state)
            if adv is not None:
                adam_step(disc.params(), adv.disc_tape.params(), disc_state)

            if cfg.use_contrastive:
                bank.update_batch(t_idx, l2_normalize(encoder.predict(variants[t_idx])))

            sums['l_ce'] += l_ce
            sums['l_cl'] += l_cl
            if adv is not None:
                sums['l_g'] += adv.gen_loss
                sums['l_d'] += adv.disc_loss

        row = {'epoch': epoch + 1, **{k: v / n_iter for k, v in sums.items()}}
        result.trace.append(row)
        logger.info(
            f"FDA epoch {epoch + 1}/{cfg.epochs}: L_ce={row['l_ce']:.4f} "
            f"L_cl={row['l_cl']:.4f} L_g={row['l_g']:.4f} L_d={row['l_d']:.4f}"
        )

    logger.info("✅ Feature distribution alignment finished")
    return result
