import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from openworld_bench.models import build_classifier
from openworld_bench.report import (CSV_COLUMNS, SCHEMA_VERSION, EvalReport, ReportError, ReportRow, emit_report,
                                    load_artifact, load_report_json, replay_success_rate)


def sample_report() -> EvalReport:
    report = EvalReport(meta={'seed': 0, 'experiment': 'unit'})
    report.add(ReportRow('cnn_s', 'shapes-in', 'in-unmod', accuracy=97.5, mean_conf=0.912345678))
    report.add(ReportRow('cnn_s', 'gaussian', 'ood-adv', attack='pgd', tsr=100.0, mean_conf=0.99871,
                         extras={'epsilon_scale': 'unit', 'success_conf': 0.123456789}))
    report.add(ReportRow('cnn_s', 'gaussian', 'ood-adv', attack='blackbox', tsr=40.0, mean_conf=0.5,
                         queries=1234.5))
    report.add(ReportRow('cnn_s', 'gaussian', 'ood-unmod', defense='odin(T=1000,eps=0.0014)',
                         det_rate=85.25, fpr=5.0))
    return report


class TestReportRow(unittest.TestCase):

    def test_values_rounded(self):
        row = ReportRow('m', 's', 'in-unmod', accuracy=12.345678, mean_conf=0.333333333)
        self.assertEqual(row.accuracy, 12.3457)
        self.assertEqual(row.mean_conf, 0.3333)

    def test_csv_cells(self):
        row = ReportRow('m', 'gaussian', 'ood-adv', attack='pgd', tsr=50.0, mean_conf=0.75)
        self.assertEqual(row.csv_cells(), ['m', 'gaussian', 'ood-adv', 'pgd', 'none',
                                           '50.0000', '', '0.7500', '', '', ''])

    def test_rejects_bad_values(self):
        with self.assertRaises(ReportError):
            ReportRow('m', 's', 'ood-adv', tsr=101.0)
        with self.assertRaises(ReportError):
            ReportRow('m', 's', 'ood-adv', mean_conf=1.5)
        with self.assertRaises(ReportError):
            ReportRow('m', 's', 'ood-adv', tsr=float('nan'))
        with self.assertRaises(ReportError):
            ReportRow('m', 's', 'ood-unmod', accuracy=90.0)
        with self.assertRaises(ReportError):
            ReportRow('m', 's', 'ood-clean')


class TestEvalReport(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_csv_header_and_order(self):
        lines = sample_report().to_csv().split('\n')
        self.assertEqual(lines[0], ','.join(CSV_COLUMNS))
        self.assertEqual(lines[-1], '')
        keys = [line.split(',')[1:4] for line in lines[1:-1]]
        self.assertEqual(keys, [['gaussian', 'ood-adv', 'blackbox'], ['gaussian', 'ood-adv', 'pgd'],
                                ['gaussian', 'ood-unmod', 'none'], ['shapes-in', 'in-unmod', 'none']])
        self.assertIn('cnn_s,gaussian,ood-adv,blackbox,none,40.0000,,0.5000,,,1234.5000', lines)

    def test_find(self):
        report = sample_report()
        self.assertEqual(len(report.find(data_source='gaussian')), 3)
        self.assertEqual(report.find(attack='pgd')[0].tsr, 100.0)

    def test_emit_and_reload(self):
        report = sample_report()
        report.partial = True
        paths = emit_report(report, Path(self.tmp_dir) / 'run')
        self.assertEqual([p.name for p in paths], ['report.csv', 'report.json'])
        record = json.loads(paths[1].read_text(encoding='utf-8'))
        self.assertEqual(record['schema_version'], SCHEMA_VERSION)
        self.assertTrue(record['partial'])
        self.assertTrue(record['literature'])

        loaded = load_report_json(paths[1])
        self.assertTrue(loaded.partial)
        self.assertEqual(loaded.sorted_rows(), report.sorted_rows())
        self.assertEqual(loaded.meta, report.meta)
        self.assertEqual(loaded.to_csv(), report.to_csv())

    def test_emit_single_format(self):
        paths = emit_report(sample_report(), self.tmp_dir, formats=['csv'])
        self.assertEqual(paths, [Path(self.tmp_dir) / 'report.csv'])
        self.assertFalse((Path(self.tmp_dir) / 'report.json').exists())
        with self.assertRaises(ReportError):
            emit_report(sample_report(), self.tmp_dir, formats=['xlsx'])

    def test_schema_version_checked(self):
        record = sample_report().to_dict()
        record['schema_version'] = 99
        with self.assertRaises(ReportError):
            EvalReport.from_dict(record)

    def test_unreadable_report(self):
        path = Path(self.tmp_dir) / 'report.json'
        path.write_text('{not json', encoding='utf-8')
        with self.assertRaises(ReportError):
            load_report_json(path)


class TestReplay(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()
        # Uniform outputs: every input is predicted as class 0
        self.model = build_classifier('linear', (1, 4, 4), ['a', 'b'], zero_final=True)

    def tearDown(self):
        shutil.rmtree(self.tmp_dir)

    def test_replay_from_file(self):
        path = Path(self.tmp_dir) / 'cell.npz'
        np.savez(path, adv_examples=np.zeros((4, 1, 4, 4)), targets=np.array([0, 0, 1, 1]))
        self.assertEqual(replay_success_rate(self.model, path), 50.0)
        self.assertEqual(sorted(load_artifact(path)), ['adv_examples', 'targets'])

    def test_empty_artifact(self):
        with self.assertRaises(ReportError):
            replay_success_rate(self.model, {'adv_examples': np.zeros((0, 1, 4, 4)),
                                             'targets': np.zeros(0, dtype=np.int64)})

    def test_missing_artifact(self):
        with self.assertRaises(ReportError):
            load_artifact(Path(self.tmp_dir) / 'missing.npz')


if __name__ == '__main__':
    unittest.main()
