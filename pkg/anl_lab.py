#!/usr/bin/env python3
"""
ANL Lab
Command-line front end: stage-by-stage and end-to-end runs, evaluation and experiments
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional

logger = logging.getLogger('anl_lab')

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

THREAD_ENV_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS', 'NUMEXPR_NUM_THREADS')
RUN_MANIFEST_FILE = 'run_manifest.json'
EVAL_RANKS = (1, 5, 10)


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """Which stages ran, on which inputs, producing which artifacts"""
    config_hash: str
    seed: int
    tool_version: str
    stages: List[Dict] = field(default_factory=list)

    def add_stage(self, name: str, inputs: Dict[str, str], outputs: Dict[str, str], started: str):
        self.stages.append({
            'name': name, 'inputs': inputs, 'outputs': outputs,
            'started': started, 'finished': _now(),
        })

    def finalize(self, out_dir: str) -> str:
        """Write run_manifest.json once every referenced artifact exists"""
        from src.errors import AnlError

        missing = [p for s in self.stages for p in s['outputs'].values() if not os.path.exists(p)]
        if missing:
            raise AnlError(f"manifest references missing artifacts: {missing}")
        path = os.path.join(out_dir, RUN_MANIFEST_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2)
        return path


def load_pipeline_config(args):
    """Config file (or defaults) with the --seed override applied"""
    from src.config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _manifest(cfg) -> RunManifest:
    from src import __version__
    from src.config import config_hash

    return RunManifest(config_hash=config_hash(cfg), seed=cfg.seed, tool_version=__version__)


def _data_dir(args) -> str:
    return args.data or args.out


def cmd_generate(args) -> int:
    """Generate a seeded world and export it"""
    from src.synth_world import WorldConfig, generate_world, save_dataset

    started = _now()
    cfg = load_pipeline_config(args)
    dataset = generate_world(WorldConfig.from_pipeline(cfg))
    outputs = save_dataset(dataset, args.out, include_true_ids=not args.hide_ids)

    manifest = _manifest(cfg)
    manifest.add_stage('generate', {'config': args.config or '<defaults>'}, outputs, started)
    manifest.finalize(args.out)
    print(f"✅ {len(dataset.source)} source / {len(dataset.target)} target samples written to {args.out}")
    return EXIT_OK


def cmd_fda(args) -> int:
    """Feature distribution alignment on an exported world"""
    from src.eval_metrics import write_trace
    from src.fda import TRACE_COLUMNS
    from src.pipeline import run_alignment, stage
    from src.synth_world import load_dataset

    started = _now()
    cfg = load_pipeline_config(args)
    dataset = load_dataset(_data_dir(args))
    with stage('fda'):
        result = run_alignment(cfg, dataset)

    os.makedirs(args.out, exist_ok=True)
    outputs = {
        'encoder': os.path.join(args.out, 'encoder.json'),
        'bank': os.path.join(args.out, 'bank.json'),
        'trace': os.path.join(args.out, 'fda_trace.csv'),
    }
    result.encoder.save(outputs['encoder'])
    result.bank.save(outputs['bank'])
    write_trace(result.trace, outputs['trace'], TRACE_COLUMNS)

    manifest = _manifest(cfg)
    manifest.add_stage('fda', {'data': _data_dir(args)}, outputs, started)
    manifest.finalize(args.out)
    print(f"✅ Encoder written to {outputs['encoder']}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    """Pseudo-label the target embeddings of a trained encoder"""
    from src.clusterer import cluster_embeddings, load_distance_matrix, save_assignment
    from src.dense_net import DenseNet
    from src.pipeline import stage
    from src.synth_world import load_dataset

    started = _now()
    cfg = load_pipeline_config(args)
    dataset = load_dataset(_data_dir(args))
    encoder = DenseNet.load(args.encoder)
    distances = load_distance_matrix(args.distances) if args.distances else None

    with stage('cluster'):
        emb = encoder.predict(dataset.target.raw)
        assignment = cluster_embeddings(emb, cfg.cluster_p, cfg.min_pts, cfg.cluster_metric,
                                        distances=distances, eps_rule=cfg.eps_rule)

    os.makedirs(args.out, exist_ok=True)
    outputs = {'assignment': os.path.join(args.out, 'assignment.csv')}
    save_assignment(assignment, outputs['assignment'])

    manifest = _manifest(cfg)
    manifest.add_stage('cluster', {'data': _data_dir(args), 'encoder': args.encoder}, outputs, started)
    manifest.finalize(args.out)
    print(f"✅ {assignment.n_clusters} clusters, {len(assignment.outliers)} outliers")
    return EXIT_OK


def cmd_rss(args) -> int:
    """One reliable-sample-selection round on exported pseudo-labels"""
    from src.clusterer import load_assignment
    from src.dense_net import DenseNet
    from src.pipeline import cluster_space, stage
    from src.rss import RSSConfig, run_rss_round, save_trace, save_verdict
    from src.synth_world import load_dataset

    started = _now()
    cfg = load_pipeline_config(args)
    dataset = load_dataset(_data_dir(args))
    encoder = DenseNet.load(args.encoder)
    assignment = load_assignment(args.assignment)

    with stage('rss'):
        feats = cluster_space(encoder.predict(dataset.target.raw), cfg)
        result = run_rss_round(encoder, assignment, dataset.target.raw, feats, RSSConfig.from_pipeline(cfg))

    os.makedirs(args.out, exist_ok=True)
    outputs = {
        'verdict': os.path.join(args.out, 'verdict.csv'),
        'trace': os.path.join(args.out, 'rss_trace.csv'),
    }
    save_verdict(result.verdict, outputs['verdict'])
    save_trace(result.trace, outputs['trace'])

    manifest = _manifest(cfg)
    manifest.add_stage('rss', {'data': _data_dir(args), 'encoder': args.encoder,
                               'assignment': args.assignment}, outputs, started)
    manifest.finalize(args.out)
    print(f"✅ {result.verdict.reliable.size} reliable, {result.verdict.rejected.size} rejected")
    return EXIT_OK


def cmd_train(args) -> int:
    """Main-model epochs on a fixed partition"""
    from src.clusterer import load_assignment
    from src.dense_net import DenseNet
    from src.eval_metrics import write_trace
    from src.pipeline import retrieval_metrics, stage, train_main
    from src.rss import load_verdict
    from src.synth_world import load_dataset
    from src.trainer import TRACE_COLUMNS

    started = _now()
    cfg = load_pipeline_config(args)
    dataset = load_dataset(_data_dir(args))
    encoder = DenseNet.load(args.encoder)
    assignment = load_assignment(args.assignment)
    verdict = load_verdict(args.verdict) if args.verdict else None

    with stage('train'):
        model, rows = train_main(encoder, assignment, verdict, dataset, cfg)

    os.makedirs(args.out, exist_ok=True)
    outputs = {
        'model': os.path.join(args.out, 'main_model.json'),
        'trace': os.path.join(args.out, 'main_trace.csv'),
    }
    model.save(outputs['model'])
    write_trace(rows, outputs['trace'], TRACE_COLUMNS)

    inputs = {'data': _data_dir(args), 'encoder': args.encoder, 'assignment': args.assignment}
    if args.verdict:
        inputs['verdict'] = args.verdict
    manifest = _manifest(cfg)
    manifest.add_stage('train', inputs, outputs, started)
    manifest.finalize(args.out)

    if len(dataset.query):
        metrics = retrieval_metrics(model.encoder.predict(dataset.target.raw), dataset)
        print(f"✅ Main model trained: rank-1={metrics['rank1']:.5f} mAP={metrics['map']:.5f}")
    return EXIT_OK


def _read_table(path: str, required: List[str]):
    """CSV with a header; malformed rows are reported with their line number"""
    import pandas as pd
    from src.errors import ConfigError

    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except pd.errors.ParserError as e:
        raise ConfigError(f"{path}: malformed row: {e}")
    except pd.errors.EmptyDataError:
        raise ConfigError(f"{path}: empty file")

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path}: missing columns {missing}")
    return frame


def _numeric(frame, columns: List[str], path: str):
    import pandas as pd
    from src.errors import ConfigError

    values = frame[columns].apply(pd.to_numeric, errors='coerce')
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        # header is line 1
        line = int(bad.argmax()) + 2
        raise ConfigError(f"{path}: malformed row at line {line}")
    return values.to_numpy(dtype=float)


def cmd_eval(args) -> int:
    """CMC / mAP of precomputed embeddings (optionally pairwise F of a labelling)"""
    import numpy as np
    import pandas as pd
    from src.clusterer import OUTLIER, OUTLIER_TOKEN
    from src.errors import ConfigError
    from src.eval_metrics import cmc_at, cmc_map, pairwise_f_value

    emb_frame = _read_table(args.embeddings, ['index'])
    feature_cols = [c for c in emb_frame.columns if c != 'index']
    if not feature_cols:
        raise ConfigError(f"{args.embeddings}: no feature columns")
    emb = _numeric(emb_frame, feature_cols, args.embeddings)
    emb_index = _numeric(emb_frame, ['index'], args.embeddings)[:, 0].astype(np.int64)

    meta = _read_table(args.meta, ['index', 'role', 'id', 'camera'])
    meta_num = _numeric(meta, ['index', 'id', 'camera'], args.meta).astype(np.int64)
    roles = meta['role'].astype(str).str.strip().to_numpy()
    bad_role = ~np.isin(roles, ['query', 'gallery'])
    if bad_role.any():
        raise ConfigError(f"{args.meta}: malformed row at line {int(bad_role.argmax()) + 2} "
                          f"(role must be query or gallery)")

    row_of = {int(idx): r for r, idx in enumerate(emb_index)}
    unknown = [int(i) for i in meta_num[:, 0] if int(i) not in row_of]
    if unknown:
        raise ConfigError(f"{args.meta}: indices without embeddings: {unknown[:5]}")
    rows = np.array([row_of[int(i)] for i in meta_num[:, 0]], dtype=np.int64)

    q, g = roles == 'query', roles == 'gallery'
    if not g.any():
        raise ConfigError(f"{args.meta}: empty gallery")
    if not q.any():
        raise ConfigError(f"{args.meta}: no queries")

    cmc, mean_ap = cmc_map(emb[rows[q]], meta_num[q, 1], meta_num[q, 2],
                           emb[rows[g]], meta_num[g, 1], meta_num[g, 2])
    metrics = {f'cmc@{k}': cmc_at(cmc, k) for k in EVAL_RANKS}
    metrics['map'] = mean_ap

    if args.labels:
        labels = _read_table(args.labels, ['index', 'label'])
        label_map = {int(i): (OUTLIER if str(lab) == OUTLIER_TOKEN else int(lab))
                     for i, lab in zip(labels['index'], labels['label'])}
        ids = {int(i): int(pid) for i, pid in zip(meta_num[:, 0], meta_num[:, 1])}
        common = sorted(set(label_map) & set(ids))
        if not common:
            raise ConfigError(f"{args.labels}: no index shared with {args.meta}")
        precision, recall, f = pairwise_f_value([label_map[i] for i in common], [ids[i] for i in common])
        metrics.update(precision=precision, recall=recall, f=f)

    for key, value in metrics.items():
        print(f"{key}: {value:.5f}")
    if args.csv:
        pd.DataFrame([metrics]).to_csv(args.csv, index=False, float_format='%.10g')
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """End-to-end run into <out>/<config hash>-s<seed>"""
    from src.config import config_hash
    from src.eval_metrics import cmc_at, write_report
    from src.pipeline import run_pipeline
    from src.report_generator import ReportGenerator

    started = _now()
    cfg = load_pipeline_config(args)
    run_dir = os.path.join(args.out, f'{config_hash(cfg)}-s{cfg.seed}')
    logger.info(f"Run directory: {run_dir}")

    report = run_pipeline(cfg)
    outputs = write_report(report, run_dir)
    if args.html:
        outputs['html'] = os.path.join(run_dir, 'report.html')
        ReportGenerator().generate_html_report(report, outputs['html'])

    manifest = _manifest(cfg)
    manifest.add_stage('pipeline', {'config': args.config or '<defaults>'}, outputs, started)
    manifest.finalize(run_dir)

    print("\n" + "=" * 60)
    print("✅ Pipeline complete")
    print("=" * 60)
    print(f"   Rank-1: {cmc_at(report.cmc, 1):.5f}")
    print(f"   mAP:    {report.map:.5f}")
    print(f"   Report: {outputs['report']}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    """Run one seeded ablation and store its result as JSON"""
    from src.experiments import run_experiment

    cfg = load_pipeline_config(args)
    result = run_experiment(args.name, cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f'experiment_{args.name}.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({str(k): v for k, v in result.items()}, f, indent=2)

    for key, value in result.items():
        print(f"{key}: {value}")
    print(f"✅ Result written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML, JSON or key=value config file')
    common.add_argument('--seed', type=int, help='Override the config seed')
    common.add_argument('--out', help='Output directory (default: $ANL_RUN_DIR or ./runs)')
    common.add_argument('--threads', type=int, help='Bound BLAS/OpenMP threads')
    common.add_argument('--verbose', action='store_true', help='Debug logging')
    common.add_argument('--quiet', action='store_true', help='Warnings and errors only')

    parser = argparse.ArgumentParser(
        prog='anl_lab',
        description='Cross-domain pseudo-labelling lab on seeded synthetic worlds'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', parents=[common], help='Generate and export a synthetic world')
    p.add_argument('--hide-ids', action='store_true', help='Omit the true_id column')
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('fda', parents=[common], help='Feature distribution alignment')
    p.add_argument('--data', help='Dataset directory (default: --out)')
    p.set_defaults(handler=cmd_fda)

    p = sub.add_parser('cluster', parents=[common], help='Cluster target embeddings')
    p.add_argument('--data', help='Dataset directory (default: --out)')
    p.add_argument('--encoder', required=True, help='Encoder checkpoint (JSON)')
    p.add_argument('--distances', help='Precomputed distance matrix (.npy or CSV)')
    p.set_defaults(handler=cmd_cluster)

    p = sub.add_parser('rss', parents=[common], help='Reliable sample selection round')
    p.add_argument('--data', help='Dataset directory (default: --out)')
    p.add_argument('--encoder', required=True, help='Encoder checkpoint (JSON)')
    p.add_argument('--assignment', required=True, help='Assignment CSV')
    p.set_defaults(handler=cmd_rss)

    p = sub.add_parser('train', parents=[common], help='Main-model training on a fixed partition')
    p.add_argument('--data', help='Dataset directory (default: --out)')
    p.add_argument('--encoder', required=True, help='Encoder checkpoint (JSON)')
    p.add_argument('--assignment', required=True, help='Assignment CSV')
    p.add_argument('--verdict', help='Verdict CSV (default: every clustered sample is reliable)')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='CMC / mAP of precomputed embeddings')
    p.add_argument('--embeddings', required=True, help='CSV: index,f0,f1,...')
    p.add_argument('--meta', required=True, help='CSV: index,role,id,camera')
    p.add_argument('--labels', '--f-value', dest='labels', help='CSV: index,label for the pairwise F-value')
    p.add_argument('--csv', help='Also write the metrics to this CSV')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('pipeline', parents=[common], help='End-to-end run')
    p.add_argument('--html', action='store_true', help='Also write report.html')
    p.set_defaults(handler=cmd_pipeline)

    p = sub.add_parser('experiment', parents=[common], help='Seeded ablation')
    p.add_argument('name', choices=['fda_effect', 'tau_sweep', 'neighbor_sweep', 'rss_denoising', 'outlier_effect'])
    p.set_defaults(handler=cmd_experiment)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # thread limits only take effect before numpy is imported
    if args.threads is not None:
        if args.threads < 1:
            parser.error('--threads must be >= 1')
        for var in THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)

    setup_logging(args.verbose, args.quiet)

    from src.config import default_run_dir
    from src.errors import AnlError, ConfigError, StageError

    if not args.out:
        args.out = default_run_dir()

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"Input not found: {e}")
        return EXIT_USAGE
    except StageError as e:
        logger.error(f"Stage failed: {e}")
        return EXIT_RUNTIME
    except AnlError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}")
        import traceback
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
