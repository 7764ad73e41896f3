import numpy as np
import properties

import discretize

from .base import BaseLidarRoads


# Global variables (Filenames)
GRID_PARAMETERS_FILENAME = "GridParameters.json"

# channel names of the rasterized features
STATISTICS_CHANNELS = [
    'count', 'mean_refl', 'mean_z', 'std_z', 'min_z', 'max_z'
]
OCCUPANCY_CHANNELS = ['occupancy']


class GridSpec(BaseLidarRoads):
    """
    Top-view grid in the x-y plane of the LIDAR, together with the constants
    used to normalize the per cell statistics into [0, 1].

    Images have one row per x-cell and one column per y-cell. Row 0 is the
    cell at x_max (far ahead), column 0 the cell at y_max (left), so the
    vehicle sits at the bottom of the image.
    """

    filename = properties.String(
        "filename to serialize properties to",
        default=GRID_PARAMETERS_FILENAME
    )

    x_min = properties.Float(
        "lower x bound of the grid (m)", default=6.
    )
    x_max = properties.Float(
        "upper x bound of the grid (m)", default=46.
    )
    y_min = properties.Float(
        "lower y bound of the grid (m)", default=-10.
    )
    y_max = properties.Float(
        "upper y bound of the grid (m)", default=10.
    )
    cell_size = properties.Float(
        "edge length of a square grid cell (m)", default=0.1, min=0.
    )

    features = properties.StringChoice(
        "features rasterized for the network input",
        default='statistics',
        choices=['statistics', 'occupancy']
    )

    # normalization constants
    count_max = properties.Integer(
        "number of points at which the count channel saturates",
        default=64, min=1
    )
    z_min = properties.Float(
        "elevation mapped to 0 in the elevation channels (m)", default=-2.5
    )
    z_max = properties.Float(
        "elevation mapped to 1 in the elevation channels (m)", default=1.5
    )
    std_max = properties.Float(
        "elevation standard deviation mapped to 1 (m)", default=1.
    )

    @properties.validator
    def _check_extent(self):
        if self.cell_size <= 0:
            raise properties.ValidationError(
                'cell_size must be positive, not {}'.format(self.cell_size)
            )
        for low, high, axis in [
            (self.x_min, self.x_max, 'x'), (self.y_min, self.y_max, 'y')
        ]:
            if high <= low:
                raise properties.ValidationError(
                    '{axis}_max ({high}) must be larger than {axis}_min '
                    '({low})'.format(axis=axis, high=high, low=low)
                )
            n = (high - low) / self.cell_size
            if abs(n - np.round(n)) > 1e-6 * max(1., n):
                raise properties.ValidationError(
                    'the {} extent {} is not a multiple of the cell size '
                    '{}'.format(axis, high - low, self.cell_size)
                )
        if self.z_max <= self.z_min:
            raise properties.ValidationError(
                'z_max ({}) must be larger than z_min ({})'.format(
                    self.z_max, self.z_min
                )
            )
        if self.std_max <= 0:
            raise properties.ValidationError(
                'std_max must be positive, not {}'.format(self.std_max)
            )

    # number of cells in each direction
    @property
    def ncx(self):
        return int(np.round((self.x_max - self.x_min) / self.cell_size))

    @property
    def ncy(self):
        return int(np.round((self.y_max - self.y_min) / self.cell_size))

    @property
    def height_px(self):
        """image height: one row per x-cell"""
        return self.ncx

    @property
    def width_px(self):
        """image width: one column per y-cell"""
        return self.ncy

    @property
    def shape(self):
        """(height, width) of the top-view images"""
        return (self.height_px, self.width_px)

    @property
    def channel_names(self):
        if self.features == 'occupancy':
            return list(OCCUPANCY_CHANNELS)
        return list(STATISTICS_CHANNELS)

    @property
    def n_channels(self):
        return len(self.channel_names)

    @property
    def mesh(self):
        """
        2D tensor mesh of the grid (x, y)
        """
        key = (self.x_min, self.x_max, self.y_min, self.y_max, self.cell_size)
        if getattr(self, '_mesh_key', None) != key:
            self._mesh_key = key
            self._mesh = discretize.TensorMesh(
                [
                    self.cell_size * np.ones(self.ncx),
                    self.cell_size * np.ones(self.ncy)
                ],
                origin=np.r_[self.x_min, self.y_min]
            )
        return self._mesh

    def pixel_index(self, x, y):
        """
        Image row and column of the cell containing each (x, y). Cells are
        half open, [low, high), so points at x_max or y_max are outside.

        :param numpy.ndarray x: x coordinates (m)
        :param numpy.ndarray y: y coordinates (m)
        :rtype: tuple
        :return: rows, cols, inside (rows and cols only hold points inside)
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = (
            (x >= self.x_min) & (x < self.x_max) &
            (y >= self.y_min) & (y < self.y_max)
        )
        ix = np.searchsorted(self.mesh.nodes_x, x[inside], side='right') - 1
        iy = np.searchsorted(self.mesh.nodes_y, y[inside], side='right') - 1
        ix = np.clip(ix, 0, self.ncx - 1)
        iy = np.clip(iy, 0, self.ncy - 1)
        rows = (self.ncx - 1) - ix
        cols = (self.ncy - 1) - iy
        return rows, cols, inside

    def flat_index(self, x, y):
        """
        Flat (row major) image index of the cell of each point inside the
        grid, and the mask of points inside
        """
        rows, cols, inside = self.pixel_index(x, y)
        return rows * self.width_px + cols, inside

    @property
    def row_x(self):
        """x coordinate of the cell centres of each image row"""
        return self.mesh.cell_centers_x[::-1]

    @property
    def col_y(self):
        """y coordinate of the cell centres of each image column"""
        return self.mesh.cell_centers_y[::-1]

    def cell_centers_image(self):
        """
        x and y coordinates of the cell centres laid out as images
        (height, width)
        """
        return np.meshgrid(self.row_x, self.col_y, indexing='ij')

    def rows_within(self, x_upper):
        """
        Mask of the image rows whose cell centre lies below ``x_upper``
        """
        return self.row_x < x_upper

    def normalize(self, stats):
        """
        Map raw cell statistics to [0, 1] images. Empty cells are 0 in every
        channel.

        :param lidarRoads.rasterizer.CellStats stats: raw statistics
        :rtype: numpy.ndarray
        :return: (6, height, width) float32 array
        """
        occupied = stats.count > 0
        z_range = self.z_max - self.z_min

        def elevation(z):
            return (np.clip(z, self.z_min, self.z_max) - self.z_min) / z_range

        channels = [
            np.minimum(stats.count, self.count_max) / float(self.count_max),
            np.clip(stats.mean_refl, 0., 1.),
            elevation(stats.mean_z),
            np.clip(stats.std_z, 0., self.std_max) / self.std_max,
            elevation(stats.min_z),
            elevation(stats.max_z),
        ]
        images = np.stack([np.where(occupied, c, 0.) for c in channels])
        return images.astype(np.float32)
