"""
Evaluation Metrics
Retrieval metrics (CMC, mAP), pairwise F-value of pseudo-labels and the run report
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .clusterer import OUTLIER
from .core_math import mat64
from .errors import AnlError, DomainError

logger = logging.getLogger(__name__)

REPORT_FILE = 'report.json'
REPORT_VERSION = 1
F_TRACE_COLUMNS = ['stage', 'precision', 'recall', 'f']


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def cmc_map(query_emb, query_ids, query_cams, gallery_emb, gallery_ids, gallery_cams) -> Tuple[np.ndarray, float]:
    """
    Single-query CMC curve and mAP under euclidean ranking

    Gallery entries sharing both identity and camera with the query are
    dropped from its ranking; distance ties go to the lower gallery index.

    Args:
        query_emb: (q, d) query features
        query_ids: Identity per query
        query_cams: Camera per query
        gallery_emb: (g, d) gallery features
        gallery_ids: Identity per gallery entry
        gallery_cams: Camera per gallery entry

    Returns:
        (cmc of length g, mAP); queries without a valid match are skipped
    """
    query_emb, gallery_emb = mat64(query_emb), mat64(gallery_emb)
    if gallery_emb.shape[0] == 0:
        raise DomainError("empty gallery")
    if query_emb.shape[1] != gallery_emb.shape[1]:
        raise DomainError(f"query dim {query_emb.shape[1]} != gallery dim {gallery_emb.shape[1]}")
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)

    n_gallery = gallery_emb.shape[0]
    dist = _euclidean(query_emb, gallery_emb)
    cmc_sum = np.zeros(n_gallery)
    aps = []

    for q in range(query_emb.shape[0]):
        order = np.argsort(dist[q], kind='stable')
        valid = ~((g_ids[order] == q_ids[q]) & (g_cams[order] == q_cams[q]))
        matches = (g_ids[order] == q_ids[q])[valid]
        if not matches.any():
            logger.warning(f"Query {q} has no valid gallery match; skipped")
            continue

        first = int(np.argmax(matches))
        cmc_sum[first:] += 1.0
        hit_positions = np.flatnonzero(matches) + 1
        precision_at_hits = np.arange(1, hit_positions.size + 1) / hit_positions
        aps.append(float(precision_at_hits.mean()))

    if not aps:
        logger.warning("No query had a valid match")
        return np.zeros(n_gallery), 0.0
    return cmc_sum / len(aps), float(np.mean(aps))


def pairwise_f_value(pred_labels, true_ids) -> Tuple[float, float, float]:
    """
    Pair-level precision, recall and F1 of a clustering against true identities

    Outliers form no predicted pairs; zero denominators give 0.

    Args:
        pred_labels: Cluster label per sample (OUTLIER allowed)
        true_ids: Ground-truth identity per sample

    Returns:
        (precision, recall, f)
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_ids)
    if pred.size == 0:
        raise DomainError("pairwise F-value of an empty sample set")
    if pred.shape != true.shape:
        raise DomainError(f"{pred.size} predictions for {true.size} identities")

    def pairs(counts: np.ndarray) -> int:
        return int(np.sum(counts * (counts - 1) // 2))

    clustered = pred != OUTLIER
    pred_pairs = pairs(np.unique(pred[clustered], return_counts=True)[1])
    true_pairs = pairs(np.unique(true, return_counts=True)[1])
    joint = pd.crosstab(pred[clustered], true[clustered]).to_numpy() if clustered.any() else np.zeros(0)
    hits = pairs(joint.ravel())

    precision = hits / pred_pairs if pred_pairs else 0.0
    recall = hits / true_pairs if true_pairs else 0.0
    f = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return float(precision), float(recall), float(f)


def evaluate_embeddings(embeddings: np.ndarray, dataset) -> Tuple[np.ndarray, float]:
    """
    CMC / mAP over a dataset's query/gallery split

    Args:
        embeddings: (N_T, d) features aligned with the target samples
        dataset: Dataset carrying the split and the target identities

    Returns:
        (cmc, mAP)
    """
    target = dataset.target
    q, g = dataset.query, dataset.gallery
    return cmc_map(embeddings[q], target.true_ids[q], target.cameras[q],
                   embeddings[g], target.true_ids[g], target.cameras[g])


def cmc_at(cmc, rank: int) -> float:
    """Rank-k accuracy (1-based), saturating at the end of the curve"""
    cmc = np.asarray(cmc)
    if cmc.size == 0:
        return 0.0
    return float(cmc[min(rank, cmc.size) - 1])


def _plain(value):
    """numpy scalars/arrays to JSON-native values"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


@dataclass
class MetricsReport:
    """Everything a run reports: retrieval metrics, label quality and loss traces"""
    cmc: List[float] = field(default_factory=list)
    map: float = 0.0
    f_trace: List[Dict] = field(default_factory=list)
    stages: Dict[str, Dict] = field(default_factory=dict)
    partitions: List[Dict] = field(default_factory=list)
    traces: Dict[str, List[Dict]] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    seed: int = 0
    version: int = REPORT_VERSION

    def add_f(self, stage: str, precision: float, recall: float, f: float):
        self.f_trace.append({'stage': stage, 'precision': precision, 'recall': recall, 'f': f})

    def to_dict(self) -> Dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, payload: Dict) -> 'MetricsReport':
        known = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        return cls(**known)


def write_trace(rows: List[Dict], path: str, columns: Optional[List[str]] = None):
    """One CSV per trace; columns fixed by the producing stage"""
    frame = pd.DataFrame(_plain(rows), columns=columns)
    frame.to_csv(path, index=False)


def write_report(report: MetricsReport, run_dir: str) -> Dict[str, str]:
    """
    Write report.json plus one CSV per trace

    Args:
        report: Report to persist
        run_dir: Output directory (created when missing)

    Returns:
        Mapping artifact name -> path
    """
    paths = {}
    try:
        os.makedirs(run_dir, exist_ok=True)
        paths['report'] = os.path.join(run_dir, REPORT_FILE)
        with open(paths['report'], 'w', encoding='utf-8') as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write('\n')

        paths['f_trace'] = os.path.join(run_dir, 'f_trace.csv')
        write_trace(report.f_trace, paths['f_trace'], F_TRACE_COLUMNS)
        for name in sorted(report.traces):
            paths[f'{name}_trace'] = os.path.join(run_dir, f'{name}_trace.csv')
            rows = report.traces[name]
            columns = list(rows[0].keys()) if rows else None
            write_trace(rows, paths[f'{name}_trace'], columns)
    except OSError as e:
        raise AnlError(f"could not write report to {e.filename or run_dir}: {e.strerror}") from e

    logger.info(f"✅ Report written to {paths['report']}")
    return paths


def read_report(run_dir: str) -> MetricsReport:
    path = os.path.join(run_dir, REPORT_FILE) if os.path.isdir(run_dir) else run_dir
    if not os.path.exists(path):
        raise AnlError(f"report not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return MetricsReport.from_dict(json.load(f))
