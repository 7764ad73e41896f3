import os
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from PIL import Image

from .base import ContractError, MalformedFileError
from .mesh import OCCUPANCY_CHANNELS, STATISTICS_CHANNELS


TENSOR_MAGIC = b'TVT1'
TENSOR_DTYPE = np.dtype('<f4')
HEADER_DTYPE = np.dtype('<u4')


class TopViewTensor(object):
    """
    Stack of top-view images (channels, height, width), float32

    :param numpy.ndarray data: (channels, height, width) values
    :param list channel_names: one name per channel
    """

    def __init__(self, data, channel_names=None):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None, :, :]
        if data.ndim != 3:
            raise ContractError(
                'a top-view tensor has 3 dimensions, got shape {}'.format(
                    data.shape
                )
            )
        if channel_names is None:
            channel_names = ['channel_{}'.format(i) for i in range(len(data))]
        if len(channel_names) != data.shape[0]:
            raise ContractError(
                '{} channel names for {} channels'.format(
                    len(channel_names), data.shape[0]
                )
            )
        self.data = data
        self.channel_names = list(channel_names)

    def __repr__(self):
        return '<TopViewTensor: {} ({})>'.format(
            'x'.join(str(s) for s in self.shape), ', '.join(self.channel_names)
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_channels(self):
        return self.data.shape[0]

    def channel(self, name_or_index):
        if isinstance(name_or_index, str):
            name_or_index = self.channel_names.index(name_or_index)
        return self.data[name_or_index]


class CellStats(object):
    """
    Raw (unnormalized) per cell statistics laid out as images. Empty cells
    hold 0 in every field.
    """

    fields = ['count', 'mean_refl', 'mean_z', 'std_z', 'min_z', 'max_z']

    def __init__(self, count, mean_refl, mean_z, std_z, min_z, max_z):
        self.count = count
        self.mean_refl = mean_refl
        self.mean_z = mean_z
        self.std_z = std_z
        self.min_z = min_z
        self.max_z = max_z


def _chunks(n, workers):
    bounds = np.linspace(0, n, max(int(workers), 1) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _map_chunks(fun, chunks, workers):
    if workers <= 1 or len(chunks) <= 1:
        return [fun(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map keeps the chunk order, so merging below is deterministic
        return list(pool.map(fun, chunks))


def cell_statistics(cloud, grid, workers=1):
    """
    Per cell statistics of the points of a cloud: number of points, mean
    reflectivity and mean, population standard deviation, minimum and
    maximum elevation.

    Points are split into contiguous chunks, one per worker, and partial
    sums are merged in chunk order.

    :param lidarRoads.pointcloud.PointCloud cloud: input cloud
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :param int workers: number of threads
    :rtype: CellStats
    """
    n_cells = grid.height_px * grid.width_px
    index, inside = grid.flat_index(cloud.x, cloud.y)
    z = cloud.z[inside]
    refl = cloud.reflectivity[inside]
    chunks = _chunks(len(index), workers)

    def first_pass(c):
        return (
            np.bincount(index[c], minlength=n_cells),
            np.bincount(index[c], weights=refl[c], minlength=n_cells),
            np.bincount(index[c], weights=z[c], minlength=n_cells),
        )

    count = np.zeros(n_cells, dtype=np.int64)
    sum_refl = np.zeros(n_cells)
    sum_z = np.zeros(n_cells)
    for c, r, s in _map_chunks(first_pass, chunks, workers):
        count += c
        sum_refl += r
        sum_z += s

    occupied = count > 0
    safe_count = np.maximum(count, 1)
    mean_refl = sum_refl / safe_count
    mean_z = sum_z / safe_count

    def second_pass(c):
        dz = z[c] - mean_z[index[c]]
        return np.bincount(index[c], weights=dz**2, minlength=n_cells)

    sum_sq = np.zeros(n_cells)
    for s in _map_chunks(second_pass, chunks, workers):
        sum_sq += s
    std_z = np.sqrt(sum_sq / safe_count)

    min_z = np.full(n_cells, np.inf)
    max_z = np.full(n_cells, -np.inf)
    np.minimum.at(min_z, index, z)
    np.maximum.at(max_z, index, z)

    def image(values):
        return np.where(occupied, values, 0.).reshape(grid.shape)

    return CellStats(
        count=count.reshape(grid.shape),
        mean_refl=image(mean_refl),
        mean_z=image(mean_z),
        std_z=image(std_z),
        min_z=image(min_z),
        max_z=image(max_z),
    )


def rasterize(cloud, grid, workers=1):
    """
    Six channel top-view tensor of a cloud (count, mean reflectivity, mean,
    standard deviation, minimum and maximum elevation), normalized to
    [0, 1] with the constants of the grid.

    :param lidarRoads.pointcloud.PointCloud cloud: input cloud
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :param int workers: number of threads used for the accumulation
    :rtype: TopViewTensor
    """
    stats = cell_statistics(cloud, grid, workers=workers)
    return TopViewTensor(grid.normalize(stats), STATISTICS_CHANNELS)


def rasterize_occupancy(cloud, grid):
    """
    Binary occupancy image: 1 where a cell holds at least one point
    """
    index, inside = grid.flat_index(cloud.x, cloud.y)
    occupancy = np.zeros(grid.height_px * grid.width_px, dtype=np.float32)
    occupancy[index] = 1.
    return TopViewTensor(
        occupancy.reshape(grid.shape), OCCUPANCY_CHANNELS
    )


def rasterize_features(cloud, grid, workers=1):
    """
    Network input of a cloud, according to ``grid.features``
    """
    if grid.features == 'occupancy':
        return rasterize_occupancy(cloud, grid)
    return rasterize(cloud, grid, workers=workers)


##############################################################################
#                                                                            #
#                                   File I/O                                 #
#                                                                            #
##############################################################################

def _ensure_directory(filename):
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)


def export_channel_png(tensor, channel, filename):
    """
    Write one channel as an 8-bit grayscale png, value round(255 * v)

    :param TopViewTensor tensor: top-view tensor
    :param int channel: channel index
    :param str filename: png file
    """
    if not 0 <= channel < tensor.n_channels:
        raise ContractError(
            'channel {} requested from a tensor with {} channels'.format(
                channel, tensor.n_channels
            )
        )
    values = np.clip(tensor.data[channel].astype(float), 0., 1.)
    image = np.round(255. * values).astype(np.uint8)
    _ensure_directory(filename)
    Image.fromarray(image).save(filename)
    return filename


def read_channel_png(filename):
    """
    Read a grayscale png written by :func:`export_channel_png` back into
    [0, 1]
    """
    with Image.open(filename) as im:
        image = np.asarray(im.convert('L'), dtype=np.float32)
    return image / 255.


def save_topview(tensor, filename):
    """
    Write a tensor to a TVT1 container: magic, (channels, height, width) as
    uint32, channel major float32 payload and a newline separated footer of
    channel names. All numbers are little endian.
    """
    _ensure_directory(filename)
    header = np.array(tensor.shape, dtype=HEADER_DTYPE)
    with open(filename, 'wb') as f:
        f.write(TENSOR_MAGIC)
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(tensor.data, dtype=TENSOR_DTYPE).tobytes())
        f.write('\n'.join(tensor.channel_names).encode('utf-8'))
    return filename


def load_topview(filename):
    """
    Read a TVT1 container written by :func:`save_topview`

    :rtype: TopViewTensor
    """
    with open(filename, 'rb') as f:
        raw = f.read()

    header_end = len(TENSOR_MAGIC) + 3 * HEADER_DTYPE.itemsize
    if len(raw) < header_end or raw[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise MalformedFileError(
            '{}: not a TVT1 tensor container'.format(filename)
        )

    shape = tuple(
        int(s) for s in
        np.frombuffer(raw[len(TENSOR_MAGIC):header_end], dtype=HEADER_DTYPE)
    )
    payload_end = header_end + int(np.prod(shape)) * TENSOR_DTYPE.itemsize
    if len(raw) < payload_end:
        raise MalformedFileError(
            '{}: payload truncated, expected {} values of shape {}'.format(
                filename, int(np.prod(shape)), shape
            )
        )

    data = np.frombuffer(
        raw[header_end:payload_end], dtype=TENSOR_DTYPE
    ).reshape(shape).astype(np.float32)
    names = raw[payload_end:].decode('utf-8').split('\n')
    if len(names) != shape[0]:
        raise MalformedFileError(
            '{}: {} channel names for {} channels'.format(
                filename, len(names), shape[0]
            )
        )
    return TopViewTensor(data, names)
