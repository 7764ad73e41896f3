import os
import numpy as np
import properties
from scipy.integrate import trapezoid

from .base import BaseLidarRoads, ContractError, ConfigurationError
from .mesh import GridSpec
from .pointcloud import ROAD, UNKNOWN


# Global variables (Filenames)
EVALUATION_PARAMETERS_FILENAME = "EvaluationParameters.json"

ROI_BOUNDS = [46., 41., 36., 31., 26., 21.]
METRIC_COLUMNS = ['MaxF', 'PRE', 'REC', 'FPR', 'FNR']


def _ratio(numerator, denominator):
    """numerator / denominator, 0 when the denominator is 0"""
    numerator = np.asarray(numerator, dtype=float)
    denominator = np.asarray(denominator, dtype=float)
    safe = np.where(denominator > 0, denominator, 1.)
    return np.where(denominator > 0, numerator / safe, 0.)


def f1_score(pre, rec):
    """
    Harmonic mean of precision and recall, 0 when both are 0
    """
    return _ratio(2. * np.asarray(pre) * np.asarray(rec),
                  np.asarray(pre) + np.asarray(rec))


class EvaluationConfig(BaseLidarRoads):
    """
    Parameters of the benchmark style evaluation
    """

    filename = properties.String(
        "filename to serialize properties to",
        default=EVALUATION_PARAMETERS_FILENAME
    )

    max_thresholds = properties.Integer(
        "largest number of precision-recall curve points written",
        min=2, default=1000
    )

    roi_bounds = properties.String(
        "comma separated upper x bounds (m) of the ROI study",
        default=','.join('{:g}'.format(b) for b in ROI_BOUNDS)
    )

    @property
    def bounds(self):
        return [float(b) for b in self.roi_bounds.split(',') if b.strip()]


class ConfusionCounts(object):
    """
    Pixel counts of a binary road classification

    :param int tp: road pixels predicted road
    :param int fp: not road pixels predicted road
    :param int tn: not road pixels predicted not road
    :param int fn: road pixels predicted not road
    """

    def __init__(self, tp=0, fp=0, tn=0, fn=0):
        self.tp = int(tp)
        self.fp = int(fp)
        self.tn = int(tn)
        self.fn = int(fn)

    def __repr__(self):
        return '<ConfusionCounts: tp={}, fp={}, tn={}, fn={}>'.format(
            self.tp, self.fp, self.tn, self.fn
        )

    def __eq__(self, other):
        return self.as_tuple() == other.as_tuple()

    def __add__(self, other):
        return ConfusionCounts(
            *[a + b for a, b in zip(self.as_tuple(), other.as_tuple())]
        )

    def as_tuple(self):
        return (self.tp, self.fp, self.tn, self.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def pre(self):
        return float(_ratio(self.tp, self.tp + self.fp))

    @property
    def rec(self):
        return float(_ratio(self.tp, self.tp + self.fn))

    @property
    def fpr(self):
        return float(_ratio(self.fp, self.fp + self.tn))

    @property
    def fnr(self):
        return float(_ratio(self.fn, self.fn + self.tp))

    @property
    def f1(self):
        return float(f1_score(self.pre, self.rec))

    @property
    def degenerate(self):
        """metrics whose denominator is 0 (and which are reported as 0)"""
        return [
            name for name, d in [
                ('pre', self.tp + self.fp), ('rec', self.tp + self.fn),
                ('fpr', self.fp + self.tn), ('fnr', self.fn + self.tp)
            ] if d == 0
        ]


class MetricPoint(object):
    """
    Metrics at one classification threshold
    """

    def __init__(self, threshold, counts):
        self.threshold = float(threshold)
        self.counts = counts
        self.pre = counts.pre
        self.rec = counts.rec
        self.fpr = counts.fpr
        self.fnr = counts.fnr
        self.f1 = counts.f1

    def __repr__(self):
        return '<MetricPoint: tau={:.4f}, F1={:.4f}>'.format(
            self.threshold, self.f1
        )

    def metrics(self):
        """MaxF, PRE, REC, FPR, FNR at this threshold, in percent"""
        return [100. * v for v in [
            self.f1, self.pre, self.rec, self.fpr, self.fnr
        ]]


def thinned_indices(n, max_points=None):
    """
    At most ``max_points`` quantile spaced indices of ``range(n)``, first
    and last included
    """
    if max_points is None or n <= max_points:
        return np.arange(n)
    return np.unique(
        np.round(np.linspace(0, n - 1, max_points))
    ).astype(int)


class ThresholdSweep(object):
    """
    Metrics at every distinct confidence of a set of examples, with counts
    pooled over the examples. MaxF and AP use every threshold, ``points``
    keeps at most ``max_points`` of them for the precision-recall output.

    :param numpy.ndarray thresholds: ascending thresholds
    :param numpy.ndarray counts: (n_thresholds, 4) tp, fp, tn, fn
    :param list n_unknown: number of excluded (Unknown) pixels per example
    :param int max_points: largest number of points of the PR curve
    """

    def __init__(self, thresholds, counts, n_unknown=None, max_points=None):
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1, 4)
        if len(self.counts) != len(self.thresholds):
            raise ContractError(
                '{} thresholds but {} rows of counts'.format(
                    len(self.thresholds), len(self.counts)
                )
            )
        self.n_unknown = [] if n_unknown is None else list(n_unknown)
        self.max_points = max_points

        tp, fp, tn, fn = self.counts.T
        self.pre = _ratio(tp, tp + fp)
        self.rec = _ratio(tp, tp + fn)
        self.f1 = f1_score(self.pre, self.rec)

    def __repr__(self):
        return '<ThresholdSweep: {} thresholds, MaxF={:.4f}, AP={:.4f}>'.format(
            len(self.thresholds), self.max_f, self.ap
        )

    def point(self, index):
        return MetricPoint(
            self.thresholds[index], ConfusionCounts(*self.counts[index])
        )

    @property
    def points(self):
        """MetricPoint list of the PR curve, thresholds ascending"""
        return [
            self.point(i) for i in
            thinned_indices(len(self.thresholds), self.max_points)
        ]

    @property
    def best(self):
        """the point of largest F1 (the lowest threshold among ties)"""
        return self.point(int(np.argmax(self.f1)))

    @property
    def max_f(self):
        return self.best.f1

    @property
    def ap(self):
        """
        Area under the precision-recall curve by the trapezoidal rule, the
        curve extended to recall 0 at the precision of its lowest recall
        """
        order = np.lexsort((-self.pre, self.rec))
        rec = np.r_[0., self.rec[order]]
        pre = np.r_[self.pre[order][0], self.pre[order]]
        return float(trapezoid(pre, rec))

    def pr_curve(self):
        """(recall, precision) arrays of ``points``, ordered by threshold"""
        points = self.points
        return (
            np.array([p.rec for p in points]),
            np.array([p.pre for p in points])
        )


##############################################################################
#                                                                            #
#                                   Counting                                 #
#                                                                            #
##############################################################################

def _evaluated(pred, truth, x_upper, grid):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(
            'prediction of shape {} and truth of shape {} differ'.format(
                pred.shape, truth.shape
            )
        )
    evaluated = truth != UNKNOWN
    if x_upper is not None:
        if grid is None:
            grid = GridSpec()
        if pred.shape[-2:] != grid.shape:
            raise ContractError(
                'images of shape {} do not match the grid {}'.format(
                    pred.shape, grid.shape
                )
            )
        evaluated &= grid.rows_within(x_upper)[:, None]
    return pred, truth, evaluated


def confusion(pred, truth, tau, x_upper=None, grid=None):
    """
    Confusion counts of a confidence map against a label image. A pixel is
    predicted road when its confidence is at least ``tau``. Unknown pixels,
    and with ``x_upper`` the rows whose cell centre is not below x_upper,
    are not evaluated.

    :param numpy.ndarray pred: road confidence (height, width)
    :param numpy.ndarray truth: label image (height, width)
    :param float tau: threshold in [0, 1]
    :param float x_upper: optional upper x bound of the ROI (m)
    :param lidarRoads.mesh.GridSpec grid: grid of the images
    :rtype: ConfusionCounts
    """
    if not 0 <= tau <= 1:
        raise ContractError('tau must be in [0, 1], not {}'.format(tau))
    pred, truth, evaluated = _evaluated(pred, truth, x_upper, grid)
    positive = pred >= tau
    road = truth == ROAD
    return ConfusionCounts(
        tp=(positive & road & evaluated).sum(),
        fp=(positive & ~road & evaluated).sum(),
        tn=(~positive & ~road & evaluated).sum(),
        fn=(~positive & road & evaluated).sum(),
    )


def sweep(pairs, max_thresholds=1000, x_upper=None, grid=None):
    """
    Threshold sweep with confusion counts pooled over a set of
    (prediction, truth) pairs. Every distinct evaluated confidence is a
    threshold.

    :param list pairs: (confidence map, label image) pairs
    :param int max_thresholds: largest number of points kept for the
        precision-recall curve (MaxF and AP use every threshold)
    :param float x_upper: optional upper x bound of the ROI (m)
    :param lidarRoads.mesh.GridSpec grid: grid of the images
    :rtype: ThresholdSweep
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError('sweep needs at least one (prediction, truth) pair')

    confidences = []
    is_road = []
    n_unknown = []
    for pred, truth in pairs:
        pred, truth, evaluated = _evaluated(pred, truth, x_upper, grid)
        confidences.append(pred[evaluated])
        is_road.append(truth[evaluated] == ROAD)
        n_unknown.append(int((np.asarray(truth) == UNKNOWN).sum()))
    confidences = np.concatenate(confidences)
    is_road = np.concatenate(is_road)

    thresholds = np.unique(confidences)
    if len(thresholds) == 0:
        return ThresholdSweep([0.5], [[0, 0, 0, 0]], n_unknown=n_unknown)

    n_total = len(confidences)
    n_road = int(is_road.sum())
    all_sorted = np.sort(confidences)
    road_sorted = np.sort(confidences[is_road])
    # pixels with confidence >= tau
    n_positive = n_total - np.searchsorted(all_sorted, thresholds, side='left')
    tp = n_road - np.searchsorted(road_sorted, thresholds, side='left')
    fp = n_positive - tp
    fn = n_road - tp
    tn = (n_total - n_road) - fp

    return ThresholdSweep(
        thresholds, np.column_stack([tp, fp, tn, fn]), n_unknown=n_unknown,
        max_points=max_thresholds
    )


def check_roi_bounds(bounds, grid):
    for bound in bounds:
        if not grid.x_min < bound <= grid.x_max:
            raise ConfigurationError(
                'ROI bound {} m is outside ({}, {}]'.format(
                    bound, grid.x_min, grid.x_max
                )
            )


def roi_study(pairs, bounds=None, grid=None, max_thresholds=1000):
    """
    One sweep per upper x bound of the region of interest

    :rtype: list
    :return: (bound, ThresholdSweep) pairs
    """
    if bounds is None:
        bounds = ROI_BOUNDS
    if grid is None:
        grid = GridSpec()
    check_roi_bounds(bounds, grid)
    pairs = list(pairs)
    return [
        (bound, sweep(pairs, max_thresholds, x_upper=bound, grid=grid))
        for bound in bounds
    ]


class MappingComparison(object):
    """
    Sweeps of one set of predictions against two truth sources, and the
    number of cells per example where the two truths disagree
    """

    def __init__(self, pcp, ipm, disagreement):
        self.pcp = pcp
        self.ipm = ipm
        self.disagreement = disagreement

    @property
    def total_disagreement(self):
        return int(sum(self.disagreement.values()))


def label_disagreement(first, second):
    """
    Cells where both labels are known and differ
    """
    first = np.asarray(first)
    second = np.asarray(second)
    known = (first != UNKNOWN) & (second != UNKNOWN)
    return int((known & (first != second)).sum())


def compare_mappings(predictions, pcp_truths, ipm_truths, max_thresholds=1000):
    """
    Evaluate the same predictions against point cloud projection and
    inverse perspective mapping labels

    :param dict predictions: example id -> confidence map
    :param dict pcp_truths: example id -> label image
    :param dict ipm_truths: example id -> label image
    :rtype: MappingComparison
    """
    ids = sorted(predictions)
    if set(ids) != set(pcp_truths) or set(ids) != set(ipm_truths):
        raise ConfigurationError(
            'example ids differ: predictions {}, PCP {}, IPM {}'.format(
                ids, sorted(pcp_truths), sorted(ipm_truths)
            )
        )
    pcp = sweep(
        [(predictions[i], pcp_truths[i]) for i in ids], max_thresholds
    )
    ipm = sweep(
        [(predictions[i], ipm_truths[i]) for i in ids], max_thresholds
    )
    disagreement = dict(
        (i, label_disagreement(pcp_truths[i], ipm_truths[i])) for i in ids
    )
    return MappingComparison(pcp, ipm, disagreement)


##############################################################################
#                                                                            #
#                                   Outputs                                  #
#                                                                            #
##############################################################################

def _format_metrics(point):
    return ['{:.2f}'.format(v) for v in point.metrics()]


def metrics_table(rows, key_columns):
    """
    Comma separated table with key columns followed by MaxF, PRE, REC, FPR
    and FNR (percent, at the MaxF threshold)

    :param list rows: (tuple of key values, ThresholdSweep)
    :param list key_columns: names of the key columns
    """
    lines = [','.join(list(key_columns) + METRIC_COLUMNS)]
    for keys, result in rows:
        lines.append(','.join(
            ['{}'.format(k) for k in keys] + _format_metrics(result.best)
        ))
    return '\n'.join(lines) + '\n'


def roi_table(results):
    """table of a ROI study, one row per bound"""
    return metrics_table(
        [(('{:g}'.format(b),), s) for b, s in results], ['x_upper']
    )


def comparison_table(comparisons):
    """
    Table of mapping comparisons

    :param list comparisons: (split name, MappingComparison) pairs
    """
    rows = []
    for split, comparison in comparisons:
        rows.append(((split, 'IPM'), comparison.ipm))
        rows.append(((split, 'PCP'), comparison.pcp))
    return metrics_table(rows, ['split', 'mapping'])


def write_table(table, filename):
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    with open(filename, 'w') as f:
        f.write(table)
    return filename


def write_pr_curve(result, filename):
    """
    Two column text file: recall precision, one line per threshold
    """
    rec, pre = result.pr_curve()
    lines = ['{:.8f} {:.8f}'.format(r, p) for r, p in zip(rec, pre)]
    return write_table('\n'.join(lines) + '\n', filename)
