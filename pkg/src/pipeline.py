"""
Pipeline
End-to-end run: world generation, feature alignment, then the alternating
main-model / reliable-sample-selection schedule
"""

import logging
from contextlib import contextmanager
from typing import Dict, Optional, Tuple

import numpy as np

from .clusterer import OUTLIER, ClusterAssignment, cluster_embeddings
from .config import PipelineConfig, component_rng
from .core_math import l2_normalize
from .dense_net import DenseNet, build_classifier, build_discriminator, build_encoder
from .errors import ConfigError, StageError
from .eval_metrics import MetricsReport, cmc_at, evaluate_embeddings, pairwise_f_value
from .fda import FDAConfig, FDAResult, fda_train
from .rss import RSSConfig, corrupt_labels, run_rss_round
from .synth_world import Dataset, WorldConfig, generate_world
from .trainer import MainConfig, MainModel, main_epoch, main_partition

logger = logging.getLogger(__name__)


@contextmanager
def stage(name: str):
    """Tag any failure inside the block with the stage name"""
    try:
        yield
    except (StageError, ConfigError):
        raise
    except Exception as e:
        raise StageError(name, e) from e


def build_initial_models(cfg: PipelineConfig) -> Tuple[DenseNet, DenseNet]:
    """Seeded encoder and domain discriminator"""
    encoder = build_encoder(cfg.raw_dim, cfg.hidden_dim, cfg.embed_dim, component_rng(cfg.seed, 'encoder-init'))
    disc = build_discriminator(cfg.embed_dim, cfg.disc_hidden, cfg.disc_layers, component_rng(cfg.seed, 'disc-init'))
    return encoder, disc


def cluster_space(embeddings: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Features in the space the clustering metric works in"""
    return l2_normalize(embeddings) if cfg.cluster_metric == 'cosine_dist' else embeddings


def cluster_target(encoder: DenseNet, dataset: Dataset, cfg: PipelineConfig) -> Tuple[ClusterAssignment, np.ndarray]:
    """Cluster the target embeddings; returns the assignment and the raw embeddings"""
    emb = encoder.predict(dataset.target.raw)
    return cluster_embeddings(emb, cfg.cluster_p, cfg.min_pts, cfg.cluster_metric,
                              eps_rule=cfg.eps_rule), emb


def retrieval_metrics(embeddings: np.ndarray, dataset: Dataset) -> Dict:
    cmc, mean_ap = evaluate_embeddings(embeddings, dataset)
    return {
        'rank1': cmc_at(cmc, 1), 'rank5': cmc_at(cmc, 5), 'rank10': cmc_at(cmc, 10),
        'map': mean_ap, 'cmc': cmc.tolist(),
    }


def run_alignment(cfg: PipelineConfig, dataset: Dataset, **overrides) -> FDAResult:
    """fda_train from the seeded initial models"""
    encoder, disc = build_initial_models(cfg)
    return fda_train(encoder, disc, dataset, FDAConfig.from_pipeline(cfg, **overrides))


def run_direct(cfg: PipelineConfig, dataset: Dataset) -> FDAResult:
    """Source-only training (no contrastive or adversarial terms)"""
    return run_alignment(cfg, dataset, use_contrastive=False, use_adversarial=False)


def _stage_summary(name: str, result: FDAResult, dataset: Dataset, cfg: PipelineConfig,
                   report: MetricsReport) -> Dict:
    assignment, emb = cluster_target(result.encoder, dataset, cfg)
    precision, recall, f = pairwise_f_value(assignment.labels, dataset.target.true_ids)
    report.add_f(name, precision, recall, f)
    summary = retrieval_metrics(emb, dataset)
    summary.update(f=f, n_clusters=assignment.n_clusters, n_outliers=int(assignment.outliers.size))
    report.stages[name] = summary
    report.traces[name] = result.trace
    logger.info(f"{name}: rank-1={summary['rank1']:.3f} mAP={summary['map']:.3f} F={f:.3f}")
    return summary


def run_pipeline(cfg: PipelineConfig, dataset: Optional[Dataset] = None) -> MetricsReport:
    """
    Full training run

    Every ``alternation_period`` main epochs the target is re-clustered, a
    reliable-sample-selection round runs with the main model paused, and the
    reliable / rejected / outlier partition is refreshed.

    Args:
        cfg: Validated pipeline configuration
        dataset: Pre-built world; generated from ``cfg`` when omitted

    Returns:
        MetricsReport with per-stage metrics, F-values around every round and all traces
    """
    cfg.validate()
    report = MetricsReport(config=cfg.to_dict(), seed=cfg.seed)

    with stage('generate'):
        if dataset is None:
            dataset = generate_world(WorldConfig.from_pipeline(cfg))
    target = dataset.target
    true_ids = target.true_ids

    with stage('direct'):
        _stage_summary('direct', run_direct(cfg, dataset), dataset, cfg, report)
    with stage('fda'):
        fda = run_alignment(cfg, dataset)
        fda_summary = _stage_summary('fda', fda, dataset, cfg, report)

    report.cmc, report.map = fda_summary['cmc'], fda_summary['map']
    if cfg.main_epochs == 0:
        logger.info("✅ Pipeline finished after alignment (no main epochs)")
        return report

    main_cfg = MainConfig.from_pipeline(cfg)
    rss_cfg = RSSConfig.from_pipeline(cfg)
    model = MainModel(
        encoder=fda.encoder.copy(),
        classifier=build_classifier(cfg.embed_dim, 1, component_rng(cfg.seed, 'main-classifier-init')),
        lr=cfg.lr,
    )
    head_rng = component_rng(cfg.seed, 'main-classifier')
    main_rows, rss_rows = [], []
    assignment = partition = feats = None

    for epoch in range(cfg.main_epochs):
        if epoch % cfg.alternation_period == 0:
            round_index = epoch // cfg.alternation_period
            with stage('cluster'):
                emb = model.encoder.predict(target.raw)
                feats = cluster_space(emb, cfg)
                if assignment is None or cfg.recluster_each_round:
                    assignment = cluster_embeddings(emb, cfg.cluster_p, cfg.min_pts, cfg.cluster_metric,
                                                    eps_rule=cfg.eps_rule)
                labels = assignment
                if cfg.corruption_rate > 0:
                    noisy, _ = corrupt_labels(assignment.labels, cfg.corruption_rate, assignment.n_clusters,
                                              component_rng(cfg.seed, f'corruption-{round_index}'))
                    labels = ClusterAssignment(noisy, assignment.n_clusters, assignment.centroids)
                report.add_f(f'round{round_index}-before', *pairwise_f_value(labels.labels, true_ids))

            with stage('rss'):
                result = run_rss_round(model.encoder, labels, target.raw, feats, rss_cfg, round_index)
                rss_rows.extend(result.trace)
                partition = main_partition(labels, result.verdict).check_coverage(len(target))
                after = labels.labels.copy()
                after[partition.rejected_idx] = OUTLIER
                report.add_f(f'round{round_index}-after', *pairwise_f_value(after, true_ids))
                report.partitions.append({'round': round_index, 'epoch': epoch, **partition.counts()})
                model.ensure_classes(labels.n_clusters, head_rng)

        with stage('train'):
            main_rows.append(main_epoch(model, partition, target.raw, main_cfg, epoch + 1, embeddings=feats))

    with stage('eval'):
        final = retrieval_metrics(model.encoder.predict(target.raw), dataset)
        report.stages['final'] = final
        report.cmc, report.map = final['cmc'], final['map']
    report.traces['rss'] = rss_rows
    report.traces['main'] = main_rows

    logger.info(f"✅ Pipeline finished: rank-1={final['rank1']:.3f} mAP={final['map']:.3f}")
    return report


def train_main(encoder: DenseNet, assignment: ClusterAssignment, verdict, dataset: Dataset,
               cfg: PipelineConfig) -> Tuple[MainModel, list]:
    """
    Main-model epochs on a fixed partition (stage-by-stage runs)

    Args:
        encoder: Starting encoder (copied)
        assignment: Pseudo-labels of the target samples
        verdict: ReliableVerdict, or None to trust every clustered sample
        dataset: World
        cfg: Pipeline configuration (main_epochs, margins, batch shape)

    Returns:
        (trained model, trace rows)
    """
    target = dataset.target
    partition = main_partition(assignment, verdict).check_coverage(len(target))
    model = MainModel(
        encoder=encoder.copy(),
        classifier=build_classifier(encoder.output_dim, max(assignment.n_clusters, 1),
                                    component_rng(cfg.seed, 'main-classifier-init')),
        lr=cfg.lr,
    )
    feats = cluster_space(model.encoder.predict(target.raw), cfg)
    main_cfg = MainConfig.from_pipeline(cfg)
    rows = [main_epoch(model, partition, target.raw, main_cfg, epoch + 1, embeddings=feats)
            for epoch in range(cfg.main_epochs)]
    return model, rows
