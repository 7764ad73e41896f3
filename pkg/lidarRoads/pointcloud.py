import os
import numpy as np
from scipy.spatial.transform import Rotation

from .base import MalformedFileError, CorruptRecordError, ContractError
from .utils import report


# per point class tags
ROAD = 1
NOT_ROAD = 0
UNKNOWN = -1

LABEL_NAMES = {ROAD: 'Road', NOT_ROAD: 'NotRoad', UNKNOWN: 'Unknown'}

# augmentation: rotations about z in [-30, 30] degrees, step 3, each also
# mirrored about the x-axis
AUGMENTATION_ANGLES = np.arange(-30, 31, 3)
AUGMENTATION_FACTOR = 2 * len(AUGMENTATION_ANGLES)

# bytes per Velodyne record: four little endian float32 (x, y, z, r)
RECORD_DTYPE = np.dtype('<f4')
RECORD_SIZE = 4 * RECORD_DTYPE.itemsize


class PointCloud(object):
    """
    An ordered set of LIDAR returns (x forward, y left, z up, reflectivity)
    with optional per point labels.

    Coordinates are held in double precision. The object is treated as
    immutable: every transform returns a new cloud.

    :param numpy.ndarray xyz: (n, 3) point coordinates (m)
    :param numpy.ndarray reflectivity: (n,) reflectivity in [0, 1]
    :param numpy.ndarray labels: optional (n,) labels (ROAD, NOT_ROAD, UNKNOWN)
    """

    def __init__(self, xyz=None, reflectivity=None, labels=None):
        if xyz is None:
            xyz = np.zeros((0, 3))
        xyz = np.array(xyz, dtype=float).reshape(-1, 3)
        if reflectivity is None:
            reflectivity = np.zeros(len(xyz))
        reflectivity = np.array(reflectivity, dtype=float).ravel()

        if len(reflectivity) != len(xyz):
            raise ContractError(
                'reflectivity has {} entries for {} points'.format(
                    len(reflectivity), len(xyz)
                )
            )

        finite = np.isfinite(xyz).all(axis=1) & np.isfinite(reflectivity)
        if not finite.all():
            index = int(np.flatnonzero(~finite)[0])
            raise CorruptRecordError(
                'point {} has a non-finite value'.format(index), index=index
            )

        # counters of events that are tolerated but worth reporting
        self.stats = {}

        outside = (reflectivity < 0.) | (reflectivity > 1.)
        if outside.any():
            reflectivity = np.clip(reflectivity, 0., 1.)
        self.stats['clamped_reflectivity'] = int(outside.sum())

        self.xyz = xyz
        self.reflectivity = reflectivity
        self.labels = None
        if labels is not None:
            self.labels = self._check_labels(labels)

    def _check_labels(self, labels):
        labels = np.array(labels, dtype=np.int8).ravel()
        if len(labels) != len(self):
            raise ContractError(
                '{} labels given for {} points'.format(len(labels), len(self))
            )
        unknown_tags = ~np.isin(labels, [ROAD, NOT_ROAD, UNKNOWN])
        if unknown_tags.any():
            index = int(np.flatnonzero(unknown_tags)[0])
            raise CorruptRecordError(
                'label {} of point {} is not a class tag'.format(
                    labels[index], index
                ),
                index=index
            )
        return labels

    @classmethod
    def from_array(cls, points, labels=None):
        """
        Create a cloud from an (n, 4) array of (x, y, z, reflectivity)
        """
        points = np.asarray(points, dtype=float).reshape(-1, 4)
        return cls(points[:, :3], points[:, 3], labels=labels)

    def __len__(self):
        return self.xyz.shape[0]

    def __repr__(self):
        return '<PointCloud: {} points{}>'.format(
            len(self), ', labeled' if self.is_labeled else ''
        )

    @property
    def x(self):
        return self.xyz[:, 0]

    @property
    def y(self):
        return self.xyz[:, 1]

    @property
    def z(self):
        return self.xyz[:, 2]

    @property
    def is_labeled(self):
        return self.labels is not None

    @property
    def points(self):
        """(n, 4) array of x, y, z, reflectivity"""
        return np.c_[self.xyz, self.reflectivity]

    def with_labels(self, labels):
        """Copy of the cloud carrying the given labels"""
        return PointCloud(self.xyz, self.reflectivity, labels=labels)

    def with_xyz(self, xyz):
        """Copy of the cloud with new coordinates and the same attributes"""
        return PointCloud(xyz, self.reflectivity, labels=self.labels)

    def subset(self, mask):
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(
            self.xyz[mask], self.reflectivity[mask], labels=labels
        )

    def label_counts(self):
        """Number of points per class tag"""
        if self.labels is None:
            return {}
        return {
            name: int((self.labels == tag).sum())
            for tag, name in LABEL_NAMES.items()
        }


##############################################################################
#                                                                            #
#                                   File I/O                                 #
#                                                                            #
##############################################################################

def load_velodyne_bin(filename, verbose=False):
    """
    Read a KITTI Velodyne scan: consecutive 16 byte records of four little
    endian float32 values (x, y, z, reflectivity), no header.

    :param str filename: path to the .bin file
    :rtype: PointCloud
    """
    with open(filename, 'rb') as f:
        raw = f.read()

    if len(raw) % RECORD_SIZE != 0:
        raise MalformedFileError(
            '{}: length {} bytes is not a multiple of {}'.format(
                filename, len(raw), RECORD_SIZE
            )
        )

    points = np.frombuffer(raw, dtype=RECORD_DTYPE).reshape(-1, 4)
    try:
        cloud = PointCloud.from_array(points.astype(float))
    except CorruptRecordError as err:
        raise CorruptRecordError(
            '{}: record {} has a non-finite value'.format(filename, err.index),
            index=err.index
        )

    if cloud.stats['clamped_reflectivity'] > 0:
        report(
            '   {}: clamped {} reflectivities to [0, 1]'.format(
                filename, cloud.stats['clamped_reflectivity']
            ),
            verbose
        )
    return cloud


def save_velodyne_bin(cloud, filename):
    """
    Write a cloud in the KITTI Velodyne binary format
    """
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)
    with open(filename, 'wb') as f:
        f.write(cloud.points.astype(RECORD_DTYPE).tobytes())
    return filename


def label_filename(filename):
    """sidecar label file of a Velodyne scan"""
    return os.path.splitext(filename)[0] + '.lbl'


def save_labels(cloud, filename):
    """
    Write the labels of a cloud as one signed byte per point
    (1 Road, 0 NotRoad, -1 Unknown)
    """
    if not cloud.is_labeled:
        raise ContractError('the cloud carries no labels')
    with open(filename, 'wb') as f:
        f.write(cloud.labels.astype(np.int8).tobytes())
    return filename


def load_labels(filename, n_points=None):
    """
    Read a label sidecar file

    :param str filename: path to the .lbl file
    :param int n_points: expected number of labels
    """
    with open(filename, 'rb') as f:
        labels = np.frombuffer(f.read(), dtype=np.int8).copy()
    if n_points is not None and len(labels) != n_points:
        raise MalformedFileError(
            '{}: holds {} labels, expected {}'.format(
                filename, len(labels), n_points
            )
        )
    return labels


def load_labeled_cloud(filename, verbose=False):
    """
    Read a Velodyne scan together with its label sidecar
    """
    cloud = load_velodyne_bin(filename, verbose=verbose)
    labels = load_labels(label_filename(filename), n_points=len(cloud))
    try:
        return cloud.with_labels(labels)
    except CorruptRecordError as err:
        raise CorruptRecordError(
            '{}: {}'.format(label_filename(filename), err), index=err.index
        )


def save_labeled_cloud(cloud, filename):
    save_velodyne_bin(cloud, filename)
    save_labels(cloud, label_filename(filename))
    return filename


##############################################################################
#                                                                            #
#                          Geometric transformations                         #
#                                                                            #
##############################################################################

def rotate_z(cloud, angle):
    """
    Rotate a cloud about the LIDAR z-axis

    :param PointCloud cloud: input cloud
    :param float angle: rotation angle (degrees), counter clockwise seen from
        above
    :rtype: PointCloud
    """
    if not np.isfinite(angle):
        raise ContractError('rotation angle must be finite, not {}'.format(
            angle
        ))
    if angle == 0:
        return cloud.with_xyz(cloud.xyz.copy())
    rotation = Rotation.from_euler('z', angle, degrees=True)
    xyz = rotation.apply(cloud.xyz) if len(cloud) else cloud.xyz.copy()
    # z is untouched by a rotation about z
    xyz[:, 2] = cloud.z
    return cloud.with_xyz(xyz)


def mirror_x(cloud):
    """
    Mirror a cloud about the x-axis (y -> -y)
    """
    xyz = cloud.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    return cloud.with_xyz(xyz)


def augmentation_parameters():
    """
    The (angle, mirrored) pairs of the augmentation set, ordered by angle
    ascending, unmirrored before mirrored
    """
    return [
        (int(angle), mirrored)
        for angle in AUGMENTATION_ANGLES for mirrored in (False, True)
    ]


def augment(cloud, angle, mirrored=False):
    """
    A single member of the augmentation set: the cloud rotated by ``angle``
    then, if ``mirrored``, mirrored about the x-axis
    """
    rotated = rotate_z(cloud, angle)
    if mirrored:
        return mirror_x(rotated)
    return rotated


def augmentation_set(cloud):
    """
    The 42 augmented variants of a cloud (see :func:`augmentation_parameters`
    for the ordering)

    :rtype: list
    """
    return [
        augment(cloud, angle, mirrored)
        for angle, mirrored in augmentation_parameters()
    ]
