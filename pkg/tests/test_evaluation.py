import os
import shutil
import tempfile
import unittest
import numpy as np

from lidarRoads import evaluation
from lidarRoads.evaluation import ConfusionCounts, EvaluationConfig
from lidarRoads.base import ConfigurationError, ContractError
from lidarRoads.mesh import GridSpec
from lidarRoads.pointcloud import ROAD, NOT_ROAD, UNKNOWN


TOL = 1e-9


def random_pairs(n, shape=(32, 32), seed=0, decimals=None):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        pred = rng.uniform(0., 1., shape)
        if decimals is not None:
            pred = np.round(pred, decimals)
        truth = rng.choice(
            [ROAD, NOT_ROAD, UNKNOWN], shape, p=[0.4, 0.5, 0.1]
        ).astype(np.int8)
        pairs.append((pred, truth))
    return pairs


def pooled_confusion(pairs, tau, x_upper=None, grid=None):
    total = ConfusionCounts()
    for pred, truth in pairs:
        total = total + evaluation.confusion(pred, truth, tau, x_upper, grid)
    return total


class TestMetrics(unittest.TestCase):

    def test_f1(self):
        f1 = 100 * evaluation.f1_score(0.9281, 0.9537)
        print('F1: {:.4f}'.format(f1))
        self.assertTrue(abs(f1 - 94.07) <= 0.01)
        self.assertTrue(evaluation.f1_score(0., 0.) == 0.)

    def test_degenerate_counts(self):
        counts = ConfusionCounts(tp=0, fp=0, tn=5, fn=0)
        self.assertTrue(counts.pre == 0 and counts.rec == 0 and counts.f1 == 0)
        self.assertTrue(counts.fpr == 0.)
        self.assertTrue(counts.degenerate == ['pre', 'rec', 'fnr'])

    def test_confusion(self):
        pred = np.array([[0.9, 0.2], [0.6, 0.4]])
        truth = np.array([[ROAD, ROAD], [NOT_ROAD, UNKNOWN]])
        counts = evaluation.confusion(pred, truth, 0.5)
        self.assertTrue(counts.as_tuple() == (1, 1, 0, 1))
        # tau = 0: every evaluated pixel is predicted road
        counts = evaluation.confusion(pred, truth, 0.)
        self.assertTrue(counts.as_tuple() == (2, 1, 0, 0))
        with self.assertRaises(ContractError):
            evaluation.confusion(pred, truth, 1.5)
        with self.assertRaises(ContractError):
            evaluation.confusion(pred, truth[:1], 0.5)


class TestSweep(unittest.TestCase):

    def test_against_exhaustive_oracle(self):
        pairs = random_pairs(100)
        result = evaluation.sweep(pairs)
        print(result)

        # every distinct evaluated confidence is a threshold
        conf = np.concatenate([p[t != UNKNOWN] for p, t in pairs])
        road = np.concatenate([t[t != UNKNOWN] == ROAD for _, t in pairs])
        unique = np.unique(conf)
        self.assertTrue(len(result.thresholds) == len(unique))
        self.assertTrue(np.all(result.thresholds == unique))

        # counts at each distinct confidence from a descending cumulative sum
        order = np.argsort(-conf, kind='stable')
        tp = np.cumsum(road[order])
        n_positive = np.arange(1, len(conf) + 1)
        last = np.r_[np.diff(conf[order]) != 0, True]
        tp, n_positive = tp[last], n_positive[last]
        pre = tp / n_positive
        rec = tp / road.sum()
        f1 = np.where(pre + rec > 0, 2 * pre * rec / (pre + rec), 0.)
        print('MaxF {:.12f}, oracle {:.12f}'.format(result.max_f, f1.max()))
        self.assertTrue(abs(result.max_f - f1.max()) < TOL)

        # and a direct count at a few thresholds, the best one included
        rng = np.random.default_rng(3)
        taus = np.r_[result.best.threshold, rng.choice(unique, 5)]
        for tau in taus:
            index = int(np.searchsorted(result.thresholds, tau))
            self.assertTrue(
                result.point(index).counts == pooled_confusion(pairs, tau)
            )

    def test_thinned_curve(self):
        pairs = random_pairs(5, seed=1)
        full = evaluation.sweep(pairs, max_thresholds=10**7)
        result = evaluation.sweep(pairs, max_thresholds=50)
        self.assertTrue(len(result.points) <= 50)
        self.assertTrue(len(result.pr_curve()[0]) == len(result.points))
        thresholds = [p.threshold for p in result.points]
        self.assertTrue(np.all(np.diff(thresholds) > 0))
        for point in result.points[::7]:
            self.assertTrue(
                point.counts == pooled_confusion(pairs, point.threshold)
            )
        # thinning only affects the curve output
        self.assertTrue(result.max_f == full.max_f)
        self.assertTrue(result.ap == full.ap)

    def test_monotone_transform(self):
        pairs = random_pairs(5, seed=6)
        result = evaluation.sweep(pairs)
        squashed = evaluation.sweep([(p**3, t) for p, t in pairs])
        self.assertTrue(abs(result.max_f - squashed.max_f) < TOL)
        self.assertTrue(abs(result.ap - squashed.ap) < TOL)

    def test_perfect_prediction(self):
        _, truth = random_pairs(1)[0]
        pred = (truth == ROAD).astype(float)
        result = evaluation.sweep([(pred, truth)])
        self.assertTrue(result.max_f == 1.)
        self.assertTrue(result.best.threshold == 1.)
        self.assertTrue(result.best.fpr == 0. and result.best.fnr == 0.)
        self.assertTrue(abs(result.ap - 1.) < TOL)

    def test_unknown_counted(self):
        pairs = random_pairs(3, seed=2)
        result = evaluation.sweep(pairs)
        self.assertTrue(
            result.n_unknown == [int((t == UNKNOWN).sum()) for _, t in pairs]
        )

    def test_empty(self):
        with self.assertRaises(ContractError):
            evaluation.sweep([])


class TestRegionOfInterest(unittest.TestCase):

    def setUp(self):
        self.grid = GridSpec()
        self.pairs = random_pairs(2, shape=self.grid.shape, seed=4, decimals=2)

    def test_full_extent_is_no_crop(self):
        full = evaluation.sweep(self.pairs)
        cropped = evaluation.sweep(self.pairs, x_upper=46., grid=self.grid)
        for a, b in zip(full.points, cropped.points):
            self.assertTrue(a.counts == b.counts)

    def test_crop_keeps_near_rows(self):
        # cell centres below 26 m are the 200 bottom rows
        cropped = evaluation.sweep(self.pairs, x_upper=26., grid=self.grid)
        bottom = evaluation.sweep([(p[200:], t[200:]) for p, t in self.pairs])
        self.assertTrue(len(cropped.points) == len(bottom.points))
        for a, b in zip(cropped.points, bottom.points):
            self.assertTrue(a.counts == b.counts)

    def test_roi_study(self):
        results = evaluation.roi_study(self.pairs, grid=self.grid)
        self.assertTrue([b for b, _ in results] == evaluation.ROI_BOUNDS)
        table = evaluation.roi_table(results)
        print(table)
        lines = table.strip().split('\n')
        self.assertTrue(lines[0] == 'x_upper,MaxF,PRE,REC,FPR,FNR')
        self.assertTrue(len(lines) == 7)
        self.assertTrue(lines[1].startswith('46,'))

    def test_far_label_noise(self):
        from lidarRoads import synthetic
        scene = synthetic.SceneSpec(curb_height=0.)
        truth = synthetic.exact_topview(scene, self.grid)
        confidence = np.where(truth == ROAD, 0.9, 0.1)

        # labels beyond 30 m are flipped at random
        rng = np.random.default_rng(0)
        x, _ = self.grid.cell_centers_image()
        noisy = truth.copy()
        flip = (x > 30.) & (rng.uniform(size=truth.shape) < 0.3)
        noisy[flip] = np.where(truth[flip] == ROAD, NOT_ROAD, ROAD)

        results = dict(evaluation.roi_study(
            [(confidence, noisy)], bounds=[46., 26.], grid=self.grid
        ))
        print('MaxF at 46 m: {:.4f}, at 26 m: {:.4f}'.format(
            results[46.].max_f, results[26.].max_f
        ))
        self.assertTrue(abs(results[26.].max_f - 1.) < TOL)
        self.assertTrue(results[26.].max_f > results[46.].max_f)

    def test_out_of_range_bound(self):
        for bound in [50., 6., 0.]:
            with self.assertRaises(ConfigurationError):
                evaluation.roi_study(self.pairs, bounds=[bound], grid=self.grid)

    def test_config_bounds(self):
        config = EvaluationConfig()
        self.assertTrue(config.bounds == evaluation.ROI_BOUNDS)
        config.roi_bounds = '40, 20'
        self.assertTrue(config.bounds == [40., 20.])


class TestMappingComparison(unittest.TestCase):

    def setUp(self):
        pairs = random_pairs(3, seed=5)
        self.predictions = dict(('um_{:06d}'.format(i), p) for i, (p, _) in enumerate(pairs))
        self.pcp = dict(('um_{:06d}'.format(i), t) for i, (_, t) in enumerate(pairs))

    def test_compare(self):
        ipm = dict((k, v.copy()) for k, v in self.pcp.items())
        # flip two known cells of one example
        label = ipm['um_000001']
        known = np.flatnonzero(label.ravel() != UNKNOWN)[:2]
        flat = label.ravel()
        flat[known] = np.where(flat[known] == ROAD, NOT_ROAD, ROAD)

        comparison = evaluation.compare_mappings(self.predictions, self.pcp, ipm)
        self.assertTrue(comparison.disagreement['um_000001'] == 2)
        self.assertTrue(comparison.total_disagreement == 2)
        table = evaluation.comparison_table([('validation', comparison)])
        lines = table.strip().split('\n')
        self.assertTrue(lines[0] == 'split,mapping,MaxF,PRE,REC,FPR,FNR')
        self.assertTrue(lines[1].startswith('validation,IPM,'))
        self.assertTrue(lines[2].startswith('validation,PCP,'))

    def test_id_mismatch(self):
        ipm = dict(self.pcp)
        ipm.pop('um_000002')
        with self.assertRaises(ConfigurationError):
            evaluation.compare_mappings(self.predictions, self.pcp, ipm)


class TestOutputs(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def test_pr_curve_file(self):
        result = evaluation.sweep(random_pairs(2, decimals=1))
        filename = evaluation.write_pr_curve(
            result, os.path.join(self.directory, 'eval', 'pr_curve.txt')
        )
        curve = np.loadtxt(filename)
        rec, pre = result.pr_curve()
        self.assertTrue(curve.shape == (len(result.points), 2))
        self.assertTrue(np.allclose(curve[:, 0], rec, atol=1e-8))
        self.assertTrue(np.allclose(curve[:, 1], pre, atol=1e-8))

    def tearDown(self):
        shutil.rmtree(self.directory)


if __name__ == '__main__':
    unittest.main()
