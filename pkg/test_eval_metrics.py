"""
Tests for CMC / mAP, the pairwise F-value and the metrics report files
"""

import os

import numpy as np
import pytest

from src.clusterer import OUTLIER
from src.errors import AnlError, DomainError
from src.eval_metrics import (
    MetricsReport, cmc_at, cmc_map, evaluate_embeddings, pairwise_f_value, read_report, write_report,
)


def brute_force_cmc_map(q_emb, q_ids, q_cams, g_emb, g_ids, g_cams):
    n_g = len(g_ids)
    cmc = np.zeros(n_g)
    aps = []
    for q in range(len(q_ids)):
        dists = [float(np.linalg.norm(q_emb[q] - g_emb[j])) for j in range(n_g)]
        ranked = sorted(range(n_g), key=lambda j: (dists[j], j))
        ranked = [j for j in ranked if not (g_ids[j] == q_ids[q] and g_cams[j] == q_cams[q])]
        hits = [r + 1 for r, j in enumerate(ranked) if g_ids[j] == q_ids[q]]
        if not hits:
            continue
        for r in range(hits[0] - 1, n_g):
            cmc[r] += 1
        aps.append(np.mean([(i + 1) / pos for i, pos in enumerate(hits)]))
    if not aps:
        return cmc, 0.0
    return cmc / len(aps), float(np.mean(aps))


class TestCmcMap:

    def test_hits_at_first_and_third_rank(self):
        cmc, m_ap = cmc_map(
            [[0.0]], [1], [0],
            [[1.0], [2.0], [3.0]], [1, 2, 1], [1, 1, 1],
        )
        assert m_ap == pytest.approx(0.8333333333, abs=1e-9)
        np.testing.assert_array_equal(cmc, [1.0, 1.0, 1.0])

    def test_same_camera_match_ignored(self):
        cmc, m_ap = cmc_map(
            [[0.0]], [1], [0],
            [[0.1], [1.0], [2.0]], [1, 2, 1], [0, 1, 1],
        )
        assert cmc[0] == 0.0
        assert m_ap == pytest.approx(0.5)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n_q, n_g = int(rng.integers(1, 10)), int(rng.integers(1, 21))
            args = (
                rng.normal(size=(n_q, 3)), rng.integers(0, 4, size=n_q), rng.integers(0, 3, size=n_q),
                rng.normal(size=(n_g, 3)), rng.integers(0, 4, size=n_g), rng.integers(0, 3, size=n_g),
            )
            cmc, m_ap = cmc_map(*args)
            ref_cmc, ref_map = brute_force_cmc_map(*args)
            np.testing.assert_allclose(cmc, ref_cmc, atol=1e-10)
            assert m_ap == pytest.approx(ref_map, abs=1e-10)

    def test_cmc_monotone_and_bounded(self, rng):
        cmc, m_ap = cmc_map(rng.normal(size=(5, 2)), [0, 1, 2, 0, 1], [0] * 5,
                            rng.normal(size=(9, 2)), [0, 1, 2] * 3, [1] * 9)
        assert np.all(np.diff(cmc) >= 0)
        assert cmc[-1] == 1.0
        assert 0.0 <= m_ap <= 1.0

    def test_query_without_match_skipped(self, caplog):
        cmc, m_ap = cmc_map([[0.0], [0.0]], [1, 5], [0, 0], [[1.0], [2.0]], [1, 2], [1, 1])
        assert m_ap == 1.0
        assert 'no valid gallery match' in caplog.text

    def test_empty_gallery(self):
        with pytest.raises(DomainError):
            cmc_map([[0.0]], [1], [0], np.zeros((0, 1)), [], [])

    def test_rank_lookup(self):
        assert cmc_at([0.5, 0.8, 1.0], 1) == 0.5
        assert cmc_at([0.5, 0.8, 1.0], 10) == 1.0

    def test_evaluate_on_world(self, tiny_world):
        cmc, m_ap = evaluate_embeddings(tiny_world.target.raw, tiny_world)
        assert cmc.shape == (len(tiny_world.gallery),)
        assert 0.0 < m_ap <= 1.0


class TestPairwiseF:

    def test_perfect_partition(self):
        assert pairwise_f_value([4, 4, 7, 7, 7], ['a', 'a', 'b', 'b', 'b']) == (1.0, 1.0, 1.0)

    def test_all_outliers(self):
        assert pairwise_f_value([OUTLIER] * 4, [1, 1, 2, 2]) == (0.0, 0.0, 0.0)

    def test_one_big_cluster(self):
        precision, recall, f = pairwise_f_value([0, 0, 0, 0], ['a', 'a', 'b', 'b'])
        assert precision == pytest.approx(1 / 3)
        assert recall == 1.0
        assert f == pytest.approx(0.5)

    def test_label_names_do_not_matter(self, rng):
        pred = rng.integers(0, 3, size=20)
        true = rng.integers(0, 4, size=20)
        assert pairwise_f_value(pred, true) == pytest.approx(pairwise_f_value(pred + 10, true))

    def test_length_mismatch(self):
        with pytest.raises(DomainError):
            pairwise_f_value([0, 1], [0])


def _report() -> MetricsReport:
    report = MetricsReport(cmc=[0.5, 1.0], map=0.75, seed=3, config={'tau': 0.05})
    report.add_f('round-0-before', 0.5, 0.25, 1 / 3)
    report.stages['fda'] = {'map': 0.75, 'rank1': 0.5}
    report.traces['main'] = [{'epoch': 1, 'l_ce': 1.5}, {'epoch': 2, 'l_ce': 1.25}]
    return report


class TestReportFiles:

    def test_round_trip(self, run_dir):
        write_report(_report(), run_dir)
        loaded = read_report(run_dir)
        assert loaded == _report()

    def test_repeated_writes_are_byte_identical(self, tmp_path):
        a, b = str(tmp_path / 'a'), str(tmp_path / 'b')
        write_report(_report(), a)
        write_report(_report(), b)
        for name in ('report.json', 'f_trace.csv', 'main_trace.csv'):
            with open(os.path.join(a, name), 'rb') as fa, open(os.path.join(b, name), 'rb') as fb:
                assert fa.read() == fb.read()

    def test_empty_f_trace_has_header(self, run_dir):
        paths = write_report(MetricsReport(), run_dir)
        with open(paths['f_trace'], encoding='utf-8') as f:
            assert f.read().strip() == 'stage,precision,recall,f'

    def test_missing_report(self, tmp_path):
        with pytest.raises(AnlError):
            read_report(str(tmp_path / 'absent'))
