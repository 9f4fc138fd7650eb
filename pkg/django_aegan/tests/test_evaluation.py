import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st
from scipy import stats

from django_aegan.evaluation import (
    ORDERING_EQUATION,
    ORDERING_TABLES,
    SOURCE_LOW_DOSE,
    SOURCE_MODEL,
    EvalOptions,
    MetricsReport,
    ROISphere,
    build_report,
    compare_runs,
    evaluate_subjects,
    image_metrics,
    kfold_split,
    kfold_summary,
    nrmse,
    paired_ttest,
    percentage_error,
    psnr,
    read_metric_rows,
    roi_mask,
    roi_suv_stats,
    ssim,
    weighted_score,
)
from django_aegan.exceptions import (
    ArgumentError,
    ConfigurationError,
    DegenerateStatisticError,
    GeometryError,
    ResolutionError,
    UndefinedMetricError,
)
from django_aegan.phantoms import PhantomSpec, build_dataset
from django_aegan.volumes import Volume, write_csv


GOLDEN_PSNR = {4: 60.344, 10: 58.298, 20: 56.752, 50: 54.795, 100: 53.079}

# Per-DRF scores (4, 10, 20, 50, 100) with their published table-order averages.
PUBLISHED_AVERAGES = {
    'psnr': (
        ((52.348, 51.077, 50.720, 49.866, 48.458), 51.138),
        ((54.941, 53.728, 52.302, 51.128, 49.273), 53.255),
        ((55.521, 54.018, 53.129, 51.815, 49.427), 53.806),
        ((57.975, 55.937, 54.486, 52.304, 49.825), 55.510),
        ((59.223, 56.879, 55.085, 52.599, 50.837), 56.397),
        ((58.496, 57.236, 56.217, 54.583, 52.870), 56.857),
        ((58.819, 57.464, 56.341, 54.488, 52.578), 57.023),
        ((60.344, 58.298, 56.752, 54.795, 53.079), 57.919),
        ((52.871, 49.481, 49.231, 48.149, 44.770), 50.182),
        ((54.487, 52.315, 51.827, 48.745, 45.904), 52.122),
        ((55.084, 53.781, 52.418, 49.527, 47.282), 53.001),
        ((57.017, 55.677, 53.709, 50.832, 49.074), 54.696),
        ((58.794, 56.739, 55.379, 53.151, 50.674), 56.345),
        ((58.630, 56.846, 55.635, 53.606, 51.437), 56.472),
        ((59.714, 57.139, 55.607, 53.337, 51.032), 56.858),
        ((60.160, 57.457, 56.214, 54.024, 52.013), 57.367),
    ),
    'nrmse': (
        ((0.317, 0.348, 0.364, 0.402, 0.482), 0.355),
        ((0.214, 0.307, 0.331, 0.352, 0.425), 0.292),
        ((0.193, 0.284, 0.308, 0.339, 0.418), 0.272),
        ((0.157, 0.206, 0.244, 0.312, 0.390), 0.222),
        ((0.141, 0.187, 0.231, 0.312, 0.382), 0.208),
        ((0.144, 0.172, 0.195, 0.240, 0.294), 0.183),
        ((0.140, 0.168, 0.194, 0.244, 0.306), 0.182),
        ((0.123, 0.159, 0.188, 0.235, 0.288), 0.170),
        ((0.317, 0.424, 0.436, 0.501, 0.744), 0.417),
        ((0.284, 0.319, 0.343, 0.426, 0.625), 0.343),
        ((0.240, 0.286, 0.307, 0.398, 0.495), 0.301),
        ((0.162, 0.210, 0.264, 0.373, 0.421), 0.239),
        ((0.138, 0.178, 0.211, 0.278, 0.377), 0.196),
        ((0.140, 0.175, 0.203, 0.261, 0.341), 0.190),
        ((0.130, 0.173, 0.207, 0.271, 0.358), 0.189),
        ((0.123, 0.167, 0.182, 0.251, 0.330), 0.175),
    ),
    'ssim': (
        ((0.997, 0.996, 0.996, 0.995, 0.993), 0.9961),
        ((0.998, 0.997, 0.996, 0.995, 0.993), 0.9967),
        ((0.998, 0.997, 0.996, 0.995, 0.993), 0.9967),
        ((0.998, 0.997, 0.997, 0.995, 0.993), 0.9969),
        ((0.998, 0.997, 0.997, 0.996, 0.994), 0.9971),
        ((0.997, 0.997, 0.997, 0.996, 0.995), 0.9968),
        ((0.997, 0.997, 0.997, 0.996, 0.995), 0.9968),
        ((0.998, 0.997, 0.998, 0.996, 0.995), 0.9973),
        ((0.995, 0.993, 0.994, 0.993, 0.992), 0.9939),
        ((0.996, 0.994, 0.995, 0.994, 0.993), 0.9949),
        ((0.997, 0.994, 0.995, 0.995, 0.993), 0.9954),
        ((0.998, 0.998, 0.997, 0.994, 0.993), 0.9970),
        ((0.998, 0.998, 0.998, 0.996, 0.994), 0.9975),
        ((0.998, 0.998, 0.998, 0.996, 0.994), 0.9975),
        ((0.999, 0.999, 0.998, 0.997, 0.994), 0.9983),
        ((0.999, 0.999, 0.998, 0.995, 0.993), 0.9979),
    ),
}


def metric_rows(psnr_by_drf, source=SOURCE_MODEL, subject='s0', nrmse=1.0):
    return [
        {'subject': subject, 'drf': drf, 'source': source, 'psnr': value, 'ssim': 0.9, 'nrmse': nrmse}
        for drf, value in psnr_by_drf.items()
    ]


class ImageMetricTestCase(SimpleTestCase):

    def setUp(self):
        self.ref = np.arange(8 ** 3, dtype=np.float64).reshape(8, 8, 8) / 51.1

    def test_psnr(self):
        self.assertEqual(psnr(self.ref, self.ref), math.inf)
        # range 10, unit error everywhere
        self.assertAlmostEqual(psnr(self.ref, self.ref + 1.0), 20.0, places=9)
        self.assertAlmostEqual(psnr(Volume(self.ref), Volume(self.ref + 1.0)), 20.0, places=4)
        with self.assertRaises(UndefinedMetricError):
            psnr(np.ones((4, 4, 4)), np.zeros((4, 4, 4)))
        with self.assertRaises(ArgumentError):
            psnr(self.ref, self.ref[:4])

    def test_nrmse_is_percent_of_the_range(self):
        self.assertEqual(nrmse(self.ref, self.ref), 0.0)
        self.assertAlmostEqual(nrmse(self.ref, self.ref + 1.0), 10.0, places=9)
        self.assertAlmostEqual(nrmse(self.ref, self.ref - 0.5), 5.0, places=9)

    def test_ssim(self):
        self.assertAlmostEqual(ssim(self.ref, self.ref), 1.0, places=9)
        with self.assertRaises(ArgumentError):
            ssim(np.ones((6, 8, 8)), np.ones((6, 8, 8)))

        # flat volumes leave only the luminance term
        a, b, span = 1.0, 2.0, 4.0
        c1 = (0.01 * span) ** 2
        expected = (2 * a * b + c1) / (a ** 2 + b ** 2 + c1)
        self.assertAlmostEqual(ssim(np.full((8, 8, 8), a), np.full((8, 8, 8), b), data_range=span), expected, places=6)

    def test_image_metrics(self):
        noisy = self.ref + np.random.default_rng(0).normal(0, 0.1, self.ref.shape)
        metrics = image_metrics(self.ref, noisy)
        self.assertEqual(set(metrics), {'psnr', 'ssim', 'nrmse'})
        self.assertLess(metrics['ssim'], 1.0)
        self.assertGreater(metrics['psnr'], 30)

    @settings(max_examples=30, deadline=None)
    @given(sigma=st.floats(min_value=0.01, max_value=2.0), seed=st.integers(min_value=0, max_value=1000))
    def test_more_noise_scores_worse(self, sigma, seed):
        noise = np.random.default_rng(seed).normal(0, 1, self.ref.shape)
        mild, strong = self.ref + sigma * noise, self.ref + 2 * sigma * noise
        self.assertGreater(psnr(self.ref, mild), psnr(self.ref, strong))
        self.assertLess(nrmse(self.ref, mild), nrmse(self.ref, strong))


class WeightedScoreTestCase(SimpleTestCase):

    def test_golden_orderings(self):
        self.assertAlmostEqual(weighted_score(GOLDEN_PSNR, ORDERING_TABLES), 57.919, delta=1e-3)
        self.assertAlmostEqual(weighted_score(GOLDEN_PSNR, ORDERING_EQUATION), 55.389, delta=1e-3)

    def test_published_table_averages(self):
        for metric, rows in PUBLISHED_AVERAGES.items():
            for scores, average in rows:
                with self.subTest(metric=metric, scores=scores):
                    per_drf = dict(zip((4, 10, 20, 50, 100), scores))
                    self.assertAlmostEqual(weighted_score(per_drf, ORDERING_TABLES), average, delta=2e-3)

    def test_constant_scores_are_fixed_points(self):
        flat = {drf: 7.5 for drf in GOLDEN_PSNR}
        for ordering in (ORDERING_TABLES, ORDERING_EQUATION):
            self.assertAlmostEqual(weighted_score(flat, ordering), 7.5)

    def test_missing_dose_level(self):
        partial = dict(GOLDEN_PSNR)
        del partial[50]
        with self.assertRaises(ArgumentError):
            weighted_score(partial)
        with self.assertRaises(ArgumentError):
            weighted_score(GOLDEN_PSNR, 'alphabetical')

    def test_report_headline(self):
        report = build_report(metric_rows(GOLDEN_PSNR) + metric_rows(GOLDEN_PSNR, SOURCE_LOW_DOSE))
        self.assertAlmostEqual(report.weighted[ORDERING_TABLES]['psnr'], 57.919, delta=1e-3)
        self.assertAlmostEqual(report.weighted[ORDERING_EQUATION]['psnr'], 55.389, delta=1e-3)
        self.assertAlmostEqual(report.headline('psnr'), 57.919, delta=1e-3)

        partial = build_report(metric_rows({4: 30.0, 100: 20.0}))
        self.assertEqual(partial.weighted, {})
        self.assertEqual(partial.headline('psnr'), 25.0)
        with self.assertRaises(ArgumentError):
            partial.headline('psnr', SOURCE_LOW_DOSE)


class ROITestCase(SimpleTestCase):

    def test_diameter_range(self):
        ROISphere((15, 15, 15), 19.0)
        ROISphere((15, 15, 15), 21.0)
        for diameter in (18.9, 21.5):
            with self.assertRaises(GeometryError):
                ROISphere((15, 15, 15), diameter)

    def test_mask_is_a_sphere(self):
        mask = roi_mask((31, 31, 31), (1.0, 1.0, 1.0), ROISphere((15, 15, 15), 20.0))
        self.assertTrue(mask[15, 15, 15])
        self.assertTrue(mask[25, 15, 15])
        self.assertFalse(mask[26, 15, 15])
        self.assertFalse(mask[22, 22, 22])
        np.testing.assert_array_equal(mask, mask[::-1])
        self.assertLess(abs(mask.sum() - 4 / 3 * math.pi * 1000) / (4 / 3 * math.pi * 1000), 0.02)

    def test_mask_must_fit(self):
        with self.assertRaises(GeometryError):
            roi_mask((20, 20, 20), (1.0, 1.0, 1.0), ROISphere((5, 10, 10), 20.0))

    def test_suv_stats(self):
        voxels = np.full((31, 31, 31), 4.0)
        voxels[15, 15, 15] = 9.0
        voxels[0, 0, 0] = 50.0
        mask = roi_mask(voxels.shape, (1.0, 1.0, 1.0), ROISphere((15, 15, 15)))
        suv_max, suv_mean = roi_suv_stats(Volume(voxels), ROISphere((15, 15, 15)))
        self.assertEqual(suv_max, 9.0)
        self.assertAlmostEqual(suv_mean, 4.0 + 5.0 / mask.sum(), places=9)

    def test_percentage_error(self):
        self.assertAlmostEqual(percentage_error(10.0, 11.0), 10.0)
        self.assertAlmostEqual(percentage_error(20.0, 19.0), 5.0)
        self.assertEqual(percentage_error(3.0, 3.0), 0.0)
        with self.assertRaises(ArgumentError):
            percentage_error(0.0, 1.0)


class StatisticsTestCase(SimpleTestCase):

    def test_paired_ttest_matches_scipy(self):
        rng = np.random.default_rng(1)
        a = rng.normal(10, 1, 12)
        b = a - rng.normal(0.5, 0.2, 12)
        t, p = paired_ttest(a, b)
        expected = stats.ttest_rel(a, b)
        self.assertAlmostEqual(t, expected.statistic)
        self.assertAlmostEqual(p, expected.pvalue)
        self.assertGreater(t, 0)

    def test_paired_ttest_errors(self):
        with self.assertRaises(DegenerateStatisticError):
            paired_ttest([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
        with self.assertRaises(ArgumentError):
            paired_ttest([1.0, 2.0], [1.0])
        with self.assertRaises(ArgumentError):
            paired_ttest([1.0], [2.0])

    def test_kfold_sizes(self):
        folds = kfold_split(28, 5, seed=3)
        self.assertEqual(sorted(len(val) for _, val in folds), [5, 5, 6, 6, 6])
        self.assertEqual(sorted(i for _, val in folds for i in val), list(range(28)))
        for train_ids, val_ids in folds:
            self.assertEqual(sorted(train_ids + val_ids), list(range(28)))
        self.assertEqual(folds, kfold_split(28, 5, seed=3))

    @settings(max_examples=50, deadline=None)
    @given(data=st.data())
    def test_kfold_partition(self, data):
        n = data.draw(st.integers(min_value=2, max_value=60))
        k = data.draw(st.integers(min_value=2, max_value=n))
        sizes = [len(val) for _, val in kfold_split(n, k, data.draw(st.integers(0, 100)))]
        self.assertEqual(sum(sizes), n)
        self.assertLessEqual(max(sizes) - min(sizes), 1)

    def test_kfold_errors(self):
        with self.assertRaises(ArgumentError):
            kfold_split(4, 1)
        with self.assertRaises(ArgumentError):
            kfold_split(3, 5)

    def test_kfold_summary(self):
        folds = [build_report(metric_rows({4: 30.0 + i}, nrmse=1.0 + 0.1 * i)) for i in range(5)]
        baseline = [build_report(metric_rows({4: 29.0 + i * 1.1}, nrmse=1.0 + 0.25 * i)) for i in range(5)]
        summary = kfold_summary(folds, baseline)
        self.assertEqual(summary['psnr']['folds'], [30.0, 31.0, 32.0, 33.0, 34.0])
        self.assertAlmostEqual(summary['psnr']['mean'], 32.0)
        self.assertIn('ttest', summary['psnr'])
        self.assertNotIn('ttest', kfold_summary(folds)['psnr'])

        with self.assertRaises(DegenerateStatisticError):
            kfold_summary(folds, folds)


class ReportTestCase(SimpleTestCase):

    def test_save_and_load(self):
        report = build_report(metric_rows(GOLDEN_PSNR) + metric_rows(GOLDEN_PSNR, SOURCE_LOW_DOSE), label='run')
        with tempfile.TemporaryDirectory() as tmp:
            loaded = MetricsReport.load(report.save(Path(tmp) / 'report.json'))
        self.assertEqual(loaded.per_drf, report.per_drf)
        self.assertEqual(loaded.label, 'run')
        self.assertEqual(set(loaded.definitions), {'psnr_peak', 'nrmse_normalizer', 'ssim_window'})

    def test_read_metric_rows(self):
        rows = metric_rows(GOLDEN_PSNR)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv(rows, Path(tmp) / 'metrics.csv')
            self.assertEqual(read_metric_rows(path), rows)
            with self.assertRaises(ResolutionError):
                read_metric_rows(Path(tmp) / 'missing.csv')

    def test_compare_runs(self):
        ours = metric_rows({4: 30.0, 100: 25.0}, subject='a') + metric_rows({4: 31.0, 100: 24.0}, subject='b')
        theirs = metric_rows({4: 29.0, 100: 24.5}, subject='a') + metric_rows({4: 29.5, 100: 23.0}, subject='b')
        for row in theirs:
            row['ssim'] += 0.01 * row['drf']
            row['nrmse'] -= 0.001 * row['psnr']
        section = compare_runs(ours, theirs)
        self.assertEqual(section['pairs'], 4)
        self.assertAlmostEqual(section['psnr']['mean_difference'], 1.0)
        self.assertEqual(set(section), {'pairs', 'psnr', 'ssim', 'nrmse'})

        with self.assertRaises(ArgumentError):
            compare_runs(ours[:1], theirs)

    def test_compare_runs_skips_infinite_values(self):
        ours = metric_rows({4: math.inf, 100: 25.0}, subject='a')
        theirs = metric_rows({4: 29.0, 100: 24.5}, subject='a')
        for row, shift in zip(theirs, (0.01, 0.03)):
            row['ssim'] += shift
            row['nrmse'] += shift
        self.assertNotIn('psnr', compare_runs(ours, theirs))

    def test_options(self):
        self.assertEqual(EvalOptions(drfs=[100, 4]).drfs, (4, 100))
        for kwargs in ({'split': 'holdout'}, {'ordering': 'reversed'}, {'drfs': [1]}, {'baseline_folds': 'b.json'}):
            with self.assertRaises(ConfigurationError, msg=kwargs):
                EvalOptions(**kwargs)


class EvaluateSubjectsTestCase(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.manifest = build_dataset(3, [4, 100], PhantomSpec.for_profile((16, 16, 16)), 2, Path(cls.tmp.name))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_identity_model_matches_the_low_dose_baseline(self):
        rows, report = evaluate_subjects(self.manifest, lambda low: low, label='identity')
        self.assertEqual(len(rows), len(self.manifest.subjects('test')) * 2 * 2)
        self.assertEqual(report.per_drf, report.low_dose)
        self.assertEqual(sorted(report.per_drf), [4, 100])
        self.assertEqual(report.weighted, {})
        self.assertEqual(report.scanner_profiles, {'eval': 'A'})
        # the noisier dose level scores worse
        self.assertGreater(report.per_drf[4]['psnr'], report.per_drf[100]['psnr'])

        errors = report.roi['summary']['100']
        self.assertGreaterEqual(errors['error_mean']['mean'], 0)

    def test_perfect_model_has_no_roi_error(self):
        def oracle(low):
            return self.manifest.load_pair(low.id, int(low.drf))[1]

        rows, report = evaluate_subjects(self.manifest, oracle, drfs=[100])
        model_rows = [r for r in rows if r['source'] == SOURCE_MODEL]
        self.assertTrue(all(r['psnr'] == math.inf and r['nrmse'] == 0.0 for r in model_rows))
        self.assertEqual(report.roi['summary']['100']['error_max']['mean'], 0.0)

    def test_without_roi(self):
        _, report = evaluate_subjects(self.manifest, lambda low: low, with_roi=False)
        self.assertIsNone(report.roi)

    def test_no_matching_dose_level(self):
        with self.assertRaises(ArgumentError):
            evaluate_subjects(self.manifest, lambda low: low, drfs=[20])
