import os
import numpy as np
from PIL import Image

from .base import ContractError, MalformedFileError, CorruptRecordError
from .pointcloud import PointCloud, ROAD, NOT_ROAD, UNKNOWN
from .utils import report


# default sector interpolation: sector width near the azimuth resolution of
# the scanner, steps of one grid cell
SECTOR_WIDTH = 0.2
MAX_GAP = 2.0
STEP = 0.1

# 8 bit encoding of top-view labels
LABEL_PNG_VALUES = {NOT_ROAD: 0, UNKNOWN: 128, ROAD: 255}


##############################################################################
#                                                                            #
#                          Calibration and annotations                       #
#                                                                            #
##############################################################################

class CameraCalibration(object):
    """
    Pinhole camera seen from the LIDAR: a 3 x 4 matrix mapping homogeneous
    LIDAR coordinates to homogeneous image pixels.

    :param numpy.ndarray proj: 3 x 4 projection matrix
    :param int image_width: image width (px)
    :param int image_height: image height (px)
    """

    def __init__(self, proj, image_width, image_height):
        proj = np.array(proj, dtype=float)
        if proj.shape != (3, 4):
            raise ContractError(
                'the projection matrix must be 3 x 4, not {}'.format(
                    proj.shape
                )
            )
        if not np.isfinite(proj).all():
            raise ContractError('the projection matrix has non-finite entries')
        self.proj = proj
        self.image_width = int(image_width)
        self.image_height = int(image_height)

    @classmethod
    def from_kitti(cls, P2, R0_rect, Tr_velo_to_cam, image_width, image_height):
        """
        Compose P_rect . R_rect . T_velo_to_cam, padding the rectification
        and extrinsic matrices to 4 x 4
        """
        R0 = np.eye(4)
        R0[:3, :3] = np.asarray(R0_rect, dtype=float).reshape(3, 3)
        Tr = np.eye(4)
        Tr[:3, :4] = np.asarray(Tr_velo_to_cam, dtype=float).reshape(3, 4)
        P2 = np.asarray(P2, dtype=float).reshape(3, 4)
        return cls(P2.dot(R0).dot(Tr), image_width, image_height)

    @property
    def image_shape(self):
        return (self.image_height, self.image_width)

    def project(self, xyz):
        """
        Project points into the image

        :param numpy.ndarray xyz: (n, 3) LIDAR coordinates
        :rtype: tuple
        :return: u, v (pixel coordinates) and the homogeneous scale w
        """
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        homogeneous = np.c_[xyz, np.ones(len(xyz))].dot(self.proj.T)
        w = homogeneous[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            u = homogeneous[:, 0] / w
            v = homogeneous[:, 1] / w
        return u, v, w


class PerspectiveAnnotation(object):
    """
    Road annotation in the camera perspective

    :param numpy.ndarray road_mask: (height, width) road pixels
    :param numpy.ndarray valid_mask: (height, width) annotated pixels
    """

    def __init__(self, road_mask, valid_mask=None):
        road_mask = np.asarray(road_mask, dtype=bool)
        if valid_mask is None:
            valid_mask = np.ones_like(road_mask)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if road_mask.shape != valid_mask.shape or road_mask.ndim != 2:
            raise ContractError(
                'road mask {} and valid mask {} must be images of the same '
                'shape'.format(road_mask.shape, valid_mask.shape)
            )
        if (road_mask & ~valid_mask).any():
            raise ContractError('road pixels must be valid pixels')
        self.road_mask = road_mask
        self.valid_mask = valid_mask

    @property
    def shape(self):
        return self.road_mask.shape

    def sample(self, u, v):
        """
        Labels of the nearest pixel of each (u, v); positions outside the
        image, non-finite positions and invalid pixels are UNKNOWN
        """
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        labels = np.full(u.shape, UNKNOWN, dtype=np.int8)
        finite = np.isfinite(u) & np.isfinite(v)
        cols = np.floor(np.where(finite, u, -1.) + 0.5)
        rows = np.floor(np.where(finite, v, -1.) + 0.5)
        height, width = self.shape
        inside = (
            finite & (cols >= 0) & (cols < width) & (rows >= 0) &
            (rows < height)
        )
        r = rows[inside].astype(int)
        c = cols[inside].astype(int)
        valid = self.valid_mask[r, c]
        sampled = np.where(
            valid, np.where(self.road_mask[r, c], ROAD, NOT_ROAD), UNKNOWN
        )
        labels[inside] = sampled
        return labels


##############################################################################
#                                                                            #
#                                   Mappings                                 #
#                                                                            #
##############################################################################

def _label_projection(calib, ann, xyz):
    u, v, w = calib.project(xyz)
    degenerate = (w == 0)
    in_front = w > 0
    labels = np.full(len(w), UNKNOWN, dtype=np.int8)
    labels[in_front] = ann.sample(u[in_front], v[in_front])
    return labels, int(degenerate.sum())


def project_points(cloud, calib, ann, verbose=False):
    """
    Label each point by projecting it into the perspective annotation.
    Points behind the camera, outside the image or on invalid pixels are
    UNKNOWN. Points with a zero homogeneous scale are UNKNOWN and counted
    in ``stats['degenerate_projections']`` of the returned cloud.

    :param lidarRoads.pointcloud.PointCloud cloud: input cloud
    :param CameraCalibration calib: camera calibration
    :param PerspectiveAnnotation ann: perspective annotation
    :rtype: lidarRoads.pointcloud.PointCloud
    """
    if ann.shape != calib.image_shape:
        raise ContractError(
            'annotation of shape {} for an image of shape {}'.format(
                ann.shape, calib.image_shape
            )
        )
    labels, n_degenerate = _label_projection(calib, ann, cloud.xyz)
    labeled = cloud.with_labels(labels)
    labeled.stats['degenerate_projections'] = n_degenerate
    if n_degenerate:
        report(
            '   {} points with a degenerate projection'.format(n_degenerate),
            verbose
        )
    return labeled


def densify_sectors(cloud, sector_width=SECTOR_WIDTH, max_gap=MAX_GAP,
                    step=STEP):
    """
    Interpolate a cloud within narrow circular sectors.

    Points are grouped by azimuth into sectors of ``sector_width`` degrees
    and sorted by planar range. Between consecutive points of a sector whose
    range gap is at most ``max_gap`` (and whose labels agree), points are
    inserted every ``step`` meters by linear interpolation of x, y, z and
    reflectivity. The input points come first in the output, in their
    original order, followed by the inserted points.

    :param lidarRoads.pointcloud.PointCloud cloud: input cloud
    :param float sector_width: sector width (degrees)
    :param float max_gap: largest range gap that is filled (m)
    :param float step: spacing of inserted points (m)
    :rtype: lidarRoads.pointcloud.PointCloud
    """
    if sector_width <= 0:
        raise ContractError(
            'sector_width must be positive, not {}'.format(sector_width)
        )
    if step <= 0:
        raise ContractError('step must be positive, not {}'.format(step))
    if len(cloud) < 2:
        return cloud.subset(slice(None))

    azimuth = np.degrees(np.arctan2(cloud.y, cloud.x))
    sector = np.floor(azimuth / sector_width).astype(np.int64)
    planar_range = np.hypot(cloud.x, cloud.y)

    order = np.lexsort((planar_range, sector))
    first, second = order[:-1], order[1:]
    gap = planar_range[second] - planar_range[first]

    fill = (sector[first] == sector[second]) & (gap > 0) & (gap <= max_gap)
    if cloud.is_labeled:
        fill &= cloud.labels[first] == cloud.labels[second]

    n_insert = np.zeros(len(gap), dtype=np.int64)
    n_insert[fill] = np.ceil(gap[fill] / step - 1e-9).astype(np.int64) - 1
    n_insert = np.maximum(n_insert, 0)
    if n_insert.sum() == 0:
        return cloud.subset(slice(None))

    pair = np.repeat(np.arange(len(gap)), n_insert)
    # position of each inserted point within its pair: 1, 2, ..., n
    offset = np.repeat(np.cumsum(n_insert) - n_insert, n_insert)
    k = np.arange(len(pair)) - offset + 1
    t = (k * step / gap[pair])[:, None]

    start = cloud.points[first[pair]]
    end = cloud.points[second[pair]]
    inserted = start + t * (end - start)

    points = np.r_[cloud.points, inserted]
    labels = None
    if cloud.is_labeled:
        labels = np.r_[cloud.labels, cloud.labels[first[pair]]]
    return PointCloud.from_array(points, labels=labels)


def labels_to_topview(labeled, grid):
    """
    Top-view label image from a labeled cloud: UNKNOWN where a cell holds no
    Road or NotRoad point, ROAD where road points are at least half of the
    labeled points of the cell, NOT_ROAD otherwise.

    :param lidarRoads.pointcloud.PointCloud labeled: labeled cloud
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :rtype: numpy.ndarray
    :return: (height, width) int8 label image
    """
    if not labeled.is_labeled:
        raise ContractError('labels_to_topview needs a labeled cloud')
    known = labeled.labels != UNKNOWN
    index, inside = grid.flat_index(labeled.x[known], labeled.y[known])
    road = (labeled.labels[known][inside] == ROAD).astype(float)

    n_cells = grid.height_px * grid.width_px
    n_labeled = np.bincount(index, minlength=n_cells)
    n_road = np.bincount(index, weights=road, minlength=n_cells)

    label = np.where(2 * n_road >= n_labeled, ROAD, NOT_ROAD)
    label = np.where(n_labeled == 0, UNKNOWN, label)
    return label.astype(np.int8).reshape(grid.shape)


def ipm_topview(ann, calib, grid, ground_height):
    """
    Inverse perspective mapping: each cell centre, placed on the ground at
    z = ``ground_height``, is projected into the image and takes the label
    of the nearest pixel. Cells that are behind the camera, off the image
    or on invalid pixels are UNKNOWN.

    :param PerspectiveAnnotation ann: perspective annotation
    :param CameraCalibration calib: camera calibration
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :param float ground_height: z of the ground plane in the LIDAR frame (m)
    :rtype: numpy.ndarray
    """
    x, y = grid.cell_centers_image()
    xyz = np.c_[x.ravel(), y.ravel(), np.full(x.size, ground_height)]
    labels, _ = _label_projection(calib, ann, xyz)
    return labels.reshape(grid.shape)


def annotate_pcp(cloud, calib, ann, grid, sector_width=SECTOR_WIDTH,
                 max_gap=MAX_GAP, step=STEP, verbose=False):
    """
    Point cloud projection: label the points through the camera annotation,
    interpolate the labeled cloud within sectors and rasterize the labels.

    :rtype: tuple
    :return: top-view label image, densified labeled cloud
    """
    labeled = project_points(cloud, calib, ann, verbose=verbose)
    dense = densify_sectors(
        labeled, sector_width=sector_width, max_gap=max_gap, step=step
    )
    return labels_to_topview(dense, grid), dense


##############################################################################
#                                                                            #
#                                   File I/O                                 #
#                                                                            #
##############################################################################

def _ensure_directory(filename):
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)


def load_kitti_calibration(filename, image_width, image_height):
    """
    Read a KITTI calibration file (``key: v1 v2 ...`` lines) and compose the
    LIDAR to image projection from P2, R0_rect and Tr_velo_to_cam
    """
    raw = {}
    with open(filename, 'r') as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if ':' not in line:
                raise MalformedFileError(
                    '{}: line "{}" is not "key: values"'.format(filename, line)
                )
            key, value = line.split(':', 1)
            try:
                raw[key.strip()] = np.array([float(x) for x in value.split()])
            except ValueError:
                raise MalformedFileError(
                    '{}: non-numeric values for {}'.format(filename, key)
                )

    expected = {'P2': 12, 'R0_rect': 9, 'Tr_velo_to_cam': 12}
    for key, size in expected.items():
        if key not in raw:
            raise MalformedFileError('{}: missing {}'.format(filename, key))
        if raw[key].size != size:
            raise MalformedFileError(
                '{}: {} has {} values, expected {}'.format(
                    filename, key, raw[key].size, size
                )
            )

    return CameraCalibration.from_kitti(
        raw['P2'], raw['R0_rect'], raw['Tr_velo_to_cam'],
        image_width, image_height
    )


def write_kitti_calibration(filename, P2, R0_rect, Tr_velo_to_cam):
    """
    Write a calibration file in the KITTI layout
    """
    _ensure_directory(filename)
    entries = [
        ('P2', np.asarray(P2, dtype=float).ravel()),
        ('R0_rect', np.asarray(R0_rect, dtype=float).ravel()),
        ('Tr_velo_to_cam', np.asarray(Tr_velo_to_cam, dtype=float).ravel()),
    ]
    with open(filename, 'w') as f:
        for key, values in entries:
            f.write('{}: {}\n'.format(
                key, ' '.join('{:.12e}'.format(v) for v in values)
            ))
    return filename


def load_perspective_annotation(filename):
    """
    Decode a KITTI road ground truth png: valid where red >= 128, road where
    additionally blue >= 128
    """
    with Image.open(filename) as im:
        rgb = np.asarray(im.convert('RGB'))
    valid = rgb[:, :, 0] >= 128
    road = (rgb[:, :, 2] >= 128) & valid
    return PerspectiveAnnotation(road, valid)


def save_perspective_annotation(ann, filename):
    """
    Encode an annotation as a KITTI road ground truth png (road magenta,
    not road red, invalid black)
    """
    rgb = np.zeros(ann.shape + (3,), dtype=np.uint8)
    rgb[ann.valid_mask, 0] = 255
    rgb[ann.road_mask, 2] = 255
    _ensure_directory(filename)
    Image.fromarray(rgb).save(filename)
    return filename


def save_topview_label(label, filename):
    """
    Write a top-view label image as an 8-bit png (0 NotRoad, 128 Unknown,
    255 Road)
    """
    label = np.asarray(label)
    image = np.zeros(label.shape, dtype=np.uint8)
    for tag, value in LABEL_PNG_VALUES.items():
        image[label == tag] = value
    _ensure_directory(filename)
    Image.fromarray(image).save(filename)
    return filename


def load_topview_label(filename):
    """
    Read a top-view label png written by :func:`save_topview_label`
    """
    with Image.open(filename) as im:
        image = np.asarray(im.convert('L'))
    label = np.full(image.shape, UNKNOWN, dtype=np.int8)
    known = np.zeros(image.shape, dtype=bool)
    for tag, value in LABEL_PNG_VALUES.items():
        label[image == value] = tag
        known |= image == value
    if not known.all():
        index = int(np.flatnonzero(~known.ravel())[0])
        raise CorruptRecordError(
            '{}: pixel {} holds {}, not a label value'.format(
                filename, index, image.ravel()[index]
            ),
            index=index
        )
    return label
