"""
Experiments
Seeded ablation runs: alignment effect, temperature and neighbor sweeps,
label-noise correction and outlier handling
"""

import logging
from typing import Dict, Iterable

import numpy as np

from .clusterer import OUTLIER, ClusterAssignment
from .config import PipelineConfig, component_rng
from .errors import ConfigError
from .eval_metrics import pairwise_f_value
from .pipeline import cluster_space, cluster_target, run_alignment, run_direct, run_pipeline
from .rss import RSSConfig, corrupt_labels, run_rss_round
from .synth_world import WorldConfig, generate_world

logger = logging.getLogger(__name__)

EXPERIMENTS = ('fda_effect', 'tau_sweep', 'neighbor_sweep', 'rss_denoising', 'outlier_effect')


def _post_alignment_f(cfg: PipelineConfig, dataset, **overrides) -> float:
    result = run_alignment(cfg, dataset, **overrides)
    assignment, _ = cluster_target(result.encoder, dataset, cfg)
    return pairwise_f_value(assignment.labels, dataset.target.true_ids)[2]


def fda_effect(cfg: PipelineConfig) -> Dict:
    """Clustering F-value on direct-transfer vs aligned embeddings"""
    dataset = generate_world(WorldConfig.from_pipeline(cfg))
    direct = run_direct(cfg, dataset)
    assignment, _ = cluster_target(direct.encoder, dataset, cfg)
    f_direct = pairwise_f_value(assignment.labels, dataset.target.true_ids)[2]
    f_fda = _post_alignment_f(cfg, dataset)
    logger.info(f"Alignment effect: F direct={f_direct:.4f}, F aligned={f_fda:.4f}")
    return {'f_direct': f_direct, 'f_fda': f_fda, 'improved': f_fda > f_direct}


def tau_sweep(cfg: PipelineConfig, taus: Iterable[float] = (0.01, 0.05, 0.5)) -> Dict:
    """Post-alignment F-value for every temperature"""
    dataset = generate_world(WorldConfig.from_pipeline(cfg))
    out = {}
    for tau in taus:
        out[float(tau)] = _post_alignment_f(cfg, dataset, tau=float(tau))
        logger.info(f"tau={tau}: F={out[float(tau)]:.4f}")
    return out


def neighbor_sweep(cfg: PipelineConfig, r2_values: Iterable[int] = (2, 4, 6, 8)) -> Dict:
    """Post-alignment F-value for every cross-camera neighbor count (r1 = r2 // 2)"""
    dataset = generate_world(WorldConfig.from_pipeline(cfg))
    out = {}
    for r2 in r2_values:
        out[int(r2)] = _post_alignment_f(cfg, dataset, r2=int(r2), r1=int(r2) // 2)
        logger.info(f"r2={r2}: F={out[int(r2)]:.4f}")
    return out


def noise_mask(true_ids: np.ndarray, clean: ClusterAssignment, labels: np.ndarray) -> np.ndarray:
    """
    Samples whose pseudo-label disagrees with the majority identity of that cluster

    Cluster identities come from the uncorrupted assignment; outliers are never noisy.
    """
    majority = {}
    for c in range(clean.n_clusters):
        ids, counts = np.unique(true_ids[clean.members(c)], return_counts=True)
        majority[c] = ids[np.argmax(counts)]
    return np.array([lab != OUTLIER and true_ids[i] != majority[lab] for i, lab in enumerate(labels)],
                    dtype=bool)


def _rate(mask: np.ndarray) -> float:
    return float(mask.mean()) if mask.size else 0.0


def rss_denoising(cfg: PipelineConfig, rate: float = 0.1) -> Dict:
    """
    One selection round on corrupted pseudo-labels of the aligned embeddings

    Returns:
        F-value before and after filtering, the fraction of flipped samples whose
        corrected label left the flipped class, and the noise rates of the
        kept and rejected sets
    """
    dataset = generate_world(WorldConfig.from_pipeline(cfg))
    true_ids = dataset.target.true_ids
    aligned = run_alignment(cfg, dataset)
    clean, emb = cluster_target(aligned.encoder, dataset, cfg)

    noisy_labels, flipped = corrupt_labels(clean.labels, rate, clean.n_clusters,
                                           component_rng(cfg.seed, 'corruption'))
    noisy = ClusterAssignment(noisy_labels, clean.n_clusters, clean.centroids)
    result = run_rss_round(aligned.encoder, noisy, dataset.target.raw, cluster_space(emb, cfg),
                           RSSConfig.from_pipeline(cfg, reliable_mode='rss'))
    verdict = result.verdict

    after = noisy_labels.copy()
    after[verdict.rejected] = OUTLIER
    noisy_flags = noise_mask(true_ids, clean, noisy_labels)

    corrected = 0.0
    if result.soft is not None and flipped.any():
        row_of = {int(idx): r for r, idx in enumerate(result.soft.indices)}
        moved = [result.soft.probs[row_of[i]].argmax() != noisy_labels[i] for i in np.flatnonzero(flipped)]
        corrected = float(np.mean(moved))

    out = {
        'f_before': pairwise_f_value(noisy_labels, true_ids)[2],
        'f_after': pairwise_f_value(after, true_ids)[2],
        'flipped': int(flipped.sum()),
        'flipped_corrected_fraction': corrected,
        'noise_rate_kept': _rate(noisy_flags[verdict.reliable]),
        'noise_rate_rejected': _rate(noisy_flags[verdict.rejected]),
    }
    logger.info(f"Denoising: F {out['f_before']:.4f} -> {out['f_after']:.4f}, noise kept="
                f"{out['noise_rate_kept']:.3f} rejected={out['noise_rate_rejected']:.3f}")
    return out


def outlier_effect(cfg: PipelineConfig) -> Dict:
    """Final mAP with instance-level outlier training vs outliers discarded"""
    out = {}
    for mode in ('instance', 'discard'):
        out[mode] = run_pipeline(cfg.with_overrides(outlier_mode=mode)).map
        logger.info(f"outlier_mode={mode}: mAP={out[mode]:.4f}")
    return out


def run_experiment(name: str, cfg: PipelineConfig) -> Dict:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{name}'; expected one of {EXPERIMENTS}")
    if name == 'rss_denoising':
        return rss_denoising(cfg, cfg.corruption_rate or 0.1)
    return globals()[name](cfg)
