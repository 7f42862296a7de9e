"""
Tests for the anl_lab command line: exit codes, stage-by-stage runs and evaluation
"""

import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml

from anl_lab import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from conftest import TINY


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.yaml'
    path.write_text(yaml.safe_dump(TINY), encoding='utf-8')
    return str(path)


def _manifest(out: str) -> dict:
    with open(os.path.join(out, 'run_manifest.json'), encoding='utf-8') as f:
        return json.load(f)


class TestExitCodes:

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / 'bad.yaml'
        path.write_text('temperature: 3\n', encoding='utf-8')
        assert main(['generate', '--config', str(path), '--out', str(tmp_path / 'o')]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(['generate', '--config', str(tmp_path / 'absent.yaml'), '--out', str(tmp_path)]) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path, tiny_config):
        assert main(['fda', '--config', tiny_config, '--out', str(tmp_path / 'empty')]) == EXIT_USAGE

    def test_missing_encoder(self, tmp_path, tiny_config):
        out = str(tmp_path / 'run')
        assert main(['generate', '--config', tiny_config, '--out', out]) == EXIT_OK
        code = main(['cluster', '--config', tiny_config, '--out', out,
                     '--encoder', str(tmp_path / 'absent.json')])
        assert code == EXIT_USAGE

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(['teleport'])

    def test_zero_threads_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(['generate', '--threads', '0', '--out', str(tmp_path)])
        assert exc.value.code == EXIT_USAGE
        assert not os.listdir(tmp_path)


class TestStageByStage:

    def test_generate_then_every_stage(self, tmp_path, tiny_config):
        out = str(tmp_path / 'run')
        common = ['--config', tiny_config, '--out', out, '--quiet']

        assert main(['generate', *common]) == EXIT_OK
        assert os.path.exists(os.path.join(out, 'dataset.csv'))
        assert _manifest(out)['stages'][0]['name'] == 'generate'

        assert main(['fda', *common]) == EXIT_OK
        encoder = os.path.join(out, 'encoder.json')
        assert os.path.exists(encoder)
        assert len(pd.read_csv(os.path.join(out, 'fda_trace.csv'))) == TINY['fda_epochs']

        assert main(['cluster', *common, '--encoder', encoder]) == EXIT_OK
        assignment = os.path.join(out, 'assignment.csv')
        assert len(pd.read_csv(assignment)) == TINY['n_identities'] * TINY['samples_per_identity']

        assert main(['rss', *common, '--encoder', encoder, '--assignment', assignment]) == EXIT_OK
        verdict = os.path.join(out, 'verdict.csv')
        assert list(pd.read_csv(verdict).columns) == ['index', 'y_c', 'y_n', 'kept']

        assert main(['train', *common, '--encoder', encoder, '--assignment', assignment,
                     '--verdict', verdict]) == EXIT_OK
        assert len(pd.read_csv(os.path.join(out, 'main_trace.csv'))) == TINY['main_epochs']
        assert _manifest(out)['stages'][0]['name'] == 'train'

    def test_seed_override_recorded(self, tmp_path, tiny_config):
        out = str(tmp_path / 'run')
        assert main(['generate', '--config', tiny_config, '--seed', '5', '--out', out]) == EXIT_OK
        assert _manifest(out)['seed'] == 5

    def test_hidden_identities(self, tmp_path, tiny_config):
        out = str(tmp_path / 'run')
        assert main(['generate', '--config', tiny_config, '--out', out, '--hide-ids']) == EXIT_OK
        assert 'true_id' not in pd.read_csv(os.path.join(out, 'dataset.csv')).columns


def _write_eval_inputs(tmp_path, roles=('query', 'gallery', 'gallery', 'gallery')):
    emb = tmp_path / 'emb.csv'
    pd.DataFrame({'index': [0, 1, 2, 3], 'f0': [0.0, 1.0, 2.0, 3.0]}).to_csv(emb, index=False)
    meta = tmp_path / 'meta.csv'
    pd.DataFrame({'index': [0, 1, 2, 3], 'role': list(roles), 'id': [1, 1, 2, 3],
                  'camera': [0, 1, 1, 1]}).to_csv(meta, index=False)
    return str(emb), str(meta)


class TestEval:

    def test_metrics_printed(self, tmp_path, capsys):
        emb, meta = _write_eval_inputs(tmp_path)
        assert main(['eval', '--embeddings', emb, '--meta', meta, '--out', str(tmp_path)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert 'cmc@1: 1.00000' in printed
        assert 'map: 1.00000' in printed

    def test_pairwise_f_and_csv(self, tmp_path, capsys):
        emb, meta = _write_eval_inputs(tmp_path)
        labels = tmp_path / 'labels.csv'
        labels.write_text('index,label\n0,0\n1,0\n2,outlier\n3,1\n', encoding='utf-8')
        out_csv = str(tmp_path / 'metrics.csv')
        code = main(['eval', '--embeddings', emb, '--meta', meta, '--f-value', str(labels),
                     '--csv', out_csv, '--out', str(tmp_path)])
        assert code == EXIT_OK
        assert 'f: 1.00000' in capsys.readouterr().out
        row = pd.read_csv(out_csv).iloc[0]
        assert row['precision'] == 1.0

    def test_empty_gallery(self, tmp_path):
        emb, meta = _write_eval_inputs(tmp_path, roles=('query',) * 4)
        assert main(['eval', '--embeddings', emb, '--meta', meta, '--out', str(tmp_path)]) == EXIT_USAGE

    def test_malformed_row(self, tmp_path):
        emb, meta = _write_eval_inputs(tmp_path)
        with open(emb, 'a', encoding='utf-8') as f:
            f.write('4,not-a-number\n')
        assert main(['eval', '--embeddings', emb, '--meta', meta, '--out', str(tmp_path)]) == EXIT_USAGE


class TestPipelineCommand:

    def test_tiny_run(self, tmp_path, tiny_config, capsys):
        out = str(tmp_path / 'runs')
        assert main(['pipeline', '--config', tiny_config, '--out', out, '--html']) == EXIT_OK
        (run_dir,) = os.listdir(out)
        assert run_dir.endswith('-s0')
        files = set(os.listdir(os.path.join(out, run_dir)))
        assert {'report.json', 'f_trace.csv', 'main_trace.csv', 'rss_trace.csv',
                'report.html', 'run_manifest.json'} <= files
        assert 'Pipeline complete' in capsys.readouterr().out

    def test_rerun_reports_are_byte_identical(self, tmp_path, tiny_config):
        def run(name):
            out = str(tmp_path / name)
            assert main(['pipeline', '--config', tiny_config, '--out', out, '--quiet']) == EXIT_OK
            (run_dir,) = os.listdir(out)
            return os.path.join(out, run_dir)

        first, second = run('a'), run('b')
        for name in ('report.json', 'f_trace.csv', 'main_trace.csv', 'rss_trace.csv'):
            with open(os.path.join(first, name), 'rb') as a, open(os.path.join(second, name), 'rb') as b:
                assert a.read() == b.read(), name
        # manifests carry wall-clock stage times and are compared by content only
        m1, m2 = _manifest(first), _manifest(second)
        assert [s['name'] for s in m1['stages']] == [s['name'] for s in m2['stages']]
        assert (m1['seed'], m1['config_hash']) == (m2['seed'], m2['config_hash'])
        assert all({'started', 'finished'} <= set(s) for s in m1['stages'])

    def test_experiment_rejects_unknown_name(self):
        with pytest.raises(SystemExit):
            main(['experiment', 'everything'])

    def test_stage_failure_is_runtime_error(self, tmp_path, tiny_config, monkeypatch):
        import src.pipeline

        def explode(*args, **kwargs):
            raise np.linalg.LinAlgError('singular')

        monkeypatch.setattr(src.pipeline, 'run_alignment', explode)
        assert main(['pipeline', '--config', tiny_config, '--out', str(tmp_path)]) == EXIT_RUNTIME
