import os
import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from PIL import Image

from .mesh import GridSpec
from .pointcloud import ROAD, UNKNOWN


def plot_pr_curve(sweeps, ax=None, labels=None):
    """
    Precision-recall curves of one or more threshold sweeps

    :param list sweeps: ThresholdSweep or a list of them
    :param matplotlib.axes ax: axes
    :param list labels: legend entries
    """
    if ax is None:
        fig, ax = plt.subplots(1, 1, figsize=(5, 5))

    if not isinstance(sweeps, (list, tuple)):
        sweeps = [sweeps]
    if labels is None:
        labels = [None] * len(sweeps)

    for result, label in zip(sweeps, labels):
        rec, pre = result.pr_curve()
        order = np.argsort(rec, kind='stable')
        if label is not None:
            label = '{} (MaxF {:.2f}%, AP {:.2f}%)'.format(
                label, 100 * result.max_f, 100 * result.ap
            )
        ax.plot(100 * rec[order], 100 * pre[order], label=label)
        best = result.best
        ax.plot(100 * best.rec, 100 * best.pre, 'o', color='k', ms=4)

    ax.set_xlim([0, 100])
    ax.set_ylim([0, 100.5])
    ax.set_xlabel('Recall [%]')
    ax.set_ylabel('Precision [%]')
    ax.grid(which='both', alpha=0.4)
    if any(l is not None for l in labels):
        ax.legend(loc='lower left')
    return ax


def plot_topview(image, grid=None, ax=None, clim=None, cmap='viridis'):
    """
    Show a top-view image (a feature channel, a confidence map or labels)
    in LIDAR coordinates, x forward pointing up

    :param numpy.ndarray image: (height, width) image
    :param lidarRoads.mesh.GridSpec grid: grid of the image
    """
    if grid is None:
        grid = GridSpec()
    if ax is None:
        fig, ax = plt.subplots(1, 1, figsize=(3, 6))

    # row 0 is x_max, column 0 is y_max
    extent = [grid.y_max, grid.y_min, grid.x_min, grid.x_max]
    im = ax.imshow(
        np.asarray(image), extent=extent, origin='upper', cmap=cmap,
        interpolation='nearest'
    )
    if clim is not None:
        im.set_clim(clim)
    cb = plt.colorbar(im, ax=ax)
    ax.set_xlabel('y (m)')
    ax.set_ylabel('x (m)')
    return ax, cb


def overlay_image(confidence, background=None, truth=None):
    """
    RGB image of a road confidence map: higher blue intensity for higher
    road probability, drawn over a gray background (e.g. the count or
    elevation channel). Unknown truth pixels, when given, are dimmed.

    :param numpy.ndarray confidence: (height, width) road probability
    :param numpy.ndarray background: (height, width) values in [0, 1]
    :param numpy.ndarray truth: optional (height, width) label image
    :rtype: numpy.ndarray
    :return: (height, width, 3) uint8 image
    """
    confidence = np.clip(np.asarray(confidence, dtype=float), 0., 1.)
    if background is None:
        background = np.zeros_like(confidence)
    gray = 0.6 * np.clip(np.asarray(background, dtype=float), 0., 1.)

    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    rgb[:, :, 0] *= 1. - confidence
    rgb[:, :, 1] *= 1. - confidence
    rgb[:, :, 2] = gray + (1. - gray) * confidence

    if truth is not None:
        rgb[np.asarray(truth) == UNKNOWN] *= 0.5
    return np.round(255 * rgb).astype(np.uint8)


def save_overlay(confidence, filename, background=None, truth=None):
    """
    Write :func:`overlay_image` as a png
    """
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    Image.fromarray(overlay_image(confidence, background, truth)).save(filename)
    return filename


def save_pr_figure(sweeps, filename, labels=None):
    """
    Write the precision-recall figure of one or more sweeps
    """
    fig, ax = plt.subplots(1, 1, figsize=(5, 5))
    plot_pr_curve(sweeps, ax=ax, labels=labels)
    fig.tight_layout()
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    fig.savefig(filename, dpi=100)
    plt.close(fig)
    return filename


def label_image(label):
    """
    Gray levels of a label image (Road white, Unknown gray, NotRoad black)
    for display
    """
    label = np.asarray(label)
    return np.where(label == ROAD, 1., np.where(label == UNKNOWN, 0.5, 0.))
