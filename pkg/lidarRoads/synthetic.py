import os
import numpy as np
import properties

from .base import BaseLidarRoads
from .utils import report
from .mesh import GridSpec
from .pointcloud import (
    PointCloud, ROAD, NOT_ROAD, save_velodyne_bin, save_labeled_cloud
)
from .annotation import (
    CameraCalibration, PerspectiveAnnotation, densify_sectors,
    write_kitti_calibration, save_perspective_annotation, save_topview_label
)


# Global variables (Filenames)
SCENE_PARAMETERS_FILENAME = "SceneParameters.json"
SCENE_DIRECTORY = 'scenes'

# surfaces a ray can hit
MISS = 0
ROAD_SURFACE = 1
OFF_ROAD = 2
CURB = 3
OBSTACLE = 4

# reflectivity of each material before noise
REFLECTIVITY = {
    ROAD_SURFACE: 0.18,
    OFF_ROAD: 0.35,
    CURB: 0.40,
    OBSTACLE: 0.65,
}

# samples of a ray between the raised and the road level, and bisection
# steps to locate the curb face
MARCH_SAMPLES = 32
BISECTION_STEPS = 40

# rays cast per chunk
CHUNK = 65536

# KITTI-like forward camera
FORWARD_FOCAL = 721.5377
FORWARD_IMAGE = (1242, 375)
FORWARD_PRINCIPAL_POINT = (609.5593, 172.854)
FORWARD_OFFSET = np.r_[0.27, 0., -0.08]

# pixels of the top down camera cover one grid cell on the ground
TOPDOWN_FOCAL = 200.


##############################################################################
#                                                                            #
#                                Scene geometry                              #
#                                                                            #
##############################################################################

class ObstacleBox(properties.HasProperties):
    """
    Axis aligned box standing on the ground. A box with a clearance is a
    raised body (e.g. a vehicle) under which rays can pass.
    """

    center_x = properties.Float("x of the box centre (m)", default=20.)
    center_y = properties.Float("y of the box centre (m)", default=0.)
    size_x = properties.Float("length along x (m)", default=4.)
    size_y = properties.Float("width along y (m)", default=1.8)
    height = properties.Float("top of the box above the ground (m)", default=1.5)
    clearance = properties.Float(
        "bottom of the box above the ground (m)", default=0.
    )

    @properties.validator
    def _check_dimensions(self):
        if self.size_x <= 0 or self.size_y <= 0:
            raise properties.ValidationError(
                'box sizes must be positive, not {} x {}'.format(
                    self.size_x, self.size_y
                )
            )
        if not 0 <= self.clearance < self.height:
            raise properties.ValidationError(
                'need 0 <= clearance ({}) < height ({})'.format(
                    self.clearance, self.height
                )
            )

    def footprint(self, x, y):
        """mask of the (x, y) positions under the box"""
        return (
            (np.abs(x - self.center_x) <= self.size_x / 2.) &
            (np.abs(y - self.center_y) <= self.size_y / 2.)
        )

    def bounds(self, ground):
        """lower and upper corner of the box for a ground level"""
        low = np.r_[
            self.center_x - self.size_x / 2.,
            self.center_y - self.size_y / 2.,
            ground + self.clearance
        ]
        high = np.r_[
            self.center_x + self.size_x / 2.,
            self.center_y + self.size_y / 2.,
            ground + self.height
        ]
        return low, high


def parse_polyline(value):
    """
    Vertices of a polyline written as ``"x0,y0; x1,y1; ..."``

    :rtype: numpy.ndarray
    :return: (n, 2) vertices
    """
    try:
        vertices = [
            [float(c) for c in vertex.split(',')]
            for vertex in value.split(';') if vertex.strip()
        ]
    except ValueError:
        raise properties.ValidationError(
            'polyline "{}" is not of the form "x0,y0; x1,y1; ..."'.format(value)
        )
    if len(vertices) < 2 or any(len(v) != 2 for v in vertices):
        raise properties.ValidationError(
            'polyline "{}" needs at least two x,y vertices'.format(value)
        )
    return np.array(vertices, dtype=float)


def format_polyline(vertices):
    return '; '.join('{:.6g},{:.6g}'.format(x, y) for x, y in vertices)


def distance_to_polyline(x, y, vertices):
    """
    Planar distance of each (x, y) to a polyline
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    distance = np.full(x.shape, np.inf)
    for a, b in zip(vertices[:-1], vertices[1:]):
        ab = b - a
        length2 = ab.dot(ab)
        t = ((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / length2
        t = np.clip(t, 0., 1.)
        dx = x - (a[0] + t * ab[0])
        dy = y - (a[1] + t * ab[1])
        distance = np.minimum(distance, np.hypot(dx, dy))
    return distance


class SceneSpec(BaseLidarRoads):
    """
    A synthetic scene: a road of constant width along a polyline centreline,
    raised off-road ground behind a curb, box obstacles, and a scanning
    LIDAR at the origin.
    """

    filename = properties.String(
        "Filename to which the properties are serialized and written to",
        default=SCENE_PARAMETERS_FILENAME
    )

    road_centerline = properties.String(
        "road centreline vertices 'x0,y0; x1,y1; ...' (m)",
        default="-20,0; 100,0"
    )

    road_width = properties.Float("road width (m)", default=7.)

    curb_height = properties.Float(
        "height of the off-road ground above the road (m)", min=0.,
        default=0.12
    )

    ground_z = properties.Float(
        "height of the sensor above the road (m)", default=1.73
    )

    obstacles = properties.List(
        "box obstacles",
        prop=properties.Instance("obstacle", ObstacleBox),
        required=False
    )

    n_rings = properties.Integer("number of scanner rings", min=1, default=64)

    min_elevation = properties.Float(
        "elevation of the lowest ring (degrees)", default=-24.8
    )

    max_elevation = properties.Float(
        "elevation of the highest ring (degrees)", default=2.
    )

    azimuth_step = properties.Float(
        "azimuth resolution (degrees)", default=0.2
    )

    azimuth_min = properties.Float("first azimuth (degrees)", default=-60.)

    azimuth_max = properties.Float("last azimuth (degrees)", default=60.)

    max_range = properties.Float("maximum range (m)", default=80.)

    range_noise = properties.Float(
        "standard deviation of the range noise (m)", default=0.
    )

    reflectivity_noise = properties.Float(
        "standard deviation of the reflectivity noise", min=0., default=0.02
    )

    seed = properties.Integer("seed of the noise", default=0)

    camera = properties.StringChoice(
        "camera of the perspective annotation",
        default='forward',
        choices=['forward', 'topdown']
    )

    @properties.validator
    def _check_scene(self):
        parse_polyline(self.road_centerline)
        if self.road_width <= 0:
            raise properties.ValidationError(
                'road_width must be positive, not {}'.format(self.road_width)
            )
        if self.azimuth_step <= 0:
            raise properties.ValidationError(
                'azimuth_step must be positive, not {}'.format(
                    self.azimuth_step
                )
            )
        if self.azimuth_max < self.azimuth_min:
            raise properties.ValidationError(
                'azimuth_max ({}) is below azimuth_min ({})'.format(
                    self.azimuth_max, self.azimuth_min
                )
            )
        if self.range_noise < 0:
            raise properties.ValidationError(
                'range_noise must be non-negative, not {}'.format(
                    self.range_noise
                )
            )
        if self.max_elevation < self.min_elevation:
            raise properties.ValidationError(
                'max_elevation ({}) is below min_elevation ({})'.format(
                    self.max_elevation, self.min_elevation
                )
            )
        if self.ground_z <= 0 or self.max_range <= 0:
            raise properties.ValidationError(
                'ground_z and max_range must be positive'
            )

    @property
    def centerline(self):
        return parse_polyline(self.road_centerline)

    @property
    def road_level(self):
        return -self.ground_z

    @property
    def off_road_level(self):
        return -self.ground_z + self.curb_height

    @property
    def elevations(self):
        """ring elevations (degrees), lowest first"""
        return np.linspace(self.min_elevation, self.max_elevation, self.n_rings)

    @property
    def azimuths(self):
        """azimuths of a sweep (degrees)"""
        n = int(np.floor(
            (self.azimuth_max - self.azimuth_min) / self.azimuth_step + 1e-9
        )) + 1
        return self.azimuth_min + self.azimuth_step * np.arange(n)

    def on_road(self, x, y):
        """mask of the (x, y) positions on the road surface"""
        distance = distance_to_polyline(x, y, self.centerline)
        return distance <= self.road_width / 2.

    def road_truth(self, x, y):
        """mask of the (x, y) positions labeled Road: on the road, not
        under an obstacle"""
        road = self.on_road(x, y)
        for box in self.obstacles or []:
            road &= ~box.footprint(x, y)
        return road


##############################################################################
#                                                                            #
#                                 Ray casting                                #
#                                                                            #
##############################################################################

def _intersect_boxes(origins, directions, scene):
    """
    Entry distance of each ray into the nearest box (slab method)
    """
    t_hit = np.full(len(origins), np.inf)
    with np.errstate(divide='ignore', invalid='ignore'):
        inverse = 1. / directions
        for box in scene.obstacles or []:
            low, high = box.bounds(scene.road_level)
            t1 = (low - origins) * inverse
            t2 = (high - origins) * inverse
            # rays parallel to a slab: inside it for all t or never
            parallel = directions == 0
            inside = (origins >= low) & (origins <= high)
            t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
            t_near = np.minimum(t1, t2).max(axis=1)
            t_far = np.maximum(t1, t2).min(axis=1)
            hit = (t_near <= t_far) & (t_far >= 0)
            t_entry = np.where(hit, np.maximum(t_near, 0.), np.inf)
            t_hit = np.minimum(t_hit, t_entry)
    return t_hit


def _intersect_ground(origins, directions, scene):
    """
    First hit with the road, the raised off-road ground or the curb face
    """
    n = len(origins)
    t_hit = np.full(n, np.inf)
    surface = np.full(n, MISS, dtype=np.int8)

    down = directions[:, 2] < 0
    if not down.any():
        return t_hit, surface
    o = origins[down]
    d = directions[down]
    t_road = (scene.road_level - o[:, 2]) / d[:, 2]
    t_raised = (scene.off_road_level - o[:, 2]) / d[:, 2]

    def position(t):
        return o[:, :2] + t[:, None] * d[:, :2]

    p = position(t_raised)
    off = ~scene.on_road(p[:, 0], p[:, 1])
    t_down = np.where(off, t_raised, t_road)
    s_down = np.where(off, OFF_ROAD, ROAD_SURFACE).astype(np.int8)

    march = np.flatnonzero(~off & (t_road > t_raised))
    if len(march):
        t0 = t_raised[march]
        t1 = t_road[march]
        fractions = np.linspace(0., 1., MARCH_SAMPLES + 1)[1:]
        ts = t0[:, None] + fractions[None, :] * (t1 - t0)[:, None]
        xs = o[march, 0][:, None] + ts * d[march, 0][:, None]
        ys = o[march, 1][:, None] + ts * d[march, 1][:, None]
        off_samples = ~scene.on_road(xs, ys)
        crosses = off_samples.any(axis=1)
        if crosses.any():
            first = off_samples.argmax(axis=1)[crosses]
            rows = march[crosses]
            ts_c = ts[crosses]
            high = ts_c[np.arange(len(first)), first]
            low = np.where(
                first > 0,
                ts_c[np.arange(len(first)), np.maximum(first - 1, 0)],
                t0[crosses]
            )
            oc = o[rows]
            dc = d[rows]
            # the curb face lies between the last road and the first
            # off-road sample
            for _ in range(BISECTION_STEPS):
                mid = 0.5 * (low + high)
                pm = oc[:, :2] + mid[:, None] * dc[:, :2]
                mid_off = ~scene.on_road(pm[:, 0], pm[:, 1])
                high = np.where(mid_off, mid, high)
                low = np.where(mid_off, low, mid)
            t_down[rows] = high
            s_down[rows] = CURB

    t_hit[down] = t_down
    surface[down] = s_down
    return t_hit, surface


def cast_rays(origins, directions, scene, max_range=np.inf):
    """
    First surface hit by each ray

    :param numpy.ndarray origins: (n, 3) ray origins
    :param numpy.ndarray directions: (n, 3) unit directions
    :param SceneSpec scene: scene
    :param float max_range: hits further away are misses
    :rtype: tuple
    :return: distances (inf for misses) and surface codes
    """
    origins = np.broadcast_to(
        np.asarray(origins, dtype=float), np.shape(directions)
    )
    directions = np.asarray(directions, dtype=float)
    t_all = np.full(len(directions), np.inf)
    s_all = np.full(len(directions), MISS, dtype=np.int8)

    for start in range(0, len(directions), CHUNK):
        chunk = slice(start, start + CHUNK)
        o = np.array(origins[chunk])
        d = directions[chunk]
        t_ground, surface = _intersect_ground(o, d, scene)
        t_box = _intersect_boxes(o, d, scene)
        box_first = t_box < t_ground
        t = np.where(box_first, t_box, t_ground)
        surface = np.where(box_first, OBSTACLE, surface).astype(np.int8)
        miss = ~(t <= max_range)
        t[miss] = np.inf
        surface[miss] = MISS
        t_all[chunk] = t
        s_all[chunk] = surface
    return t_all, s_all


def scanner_directions(scene):
    """
    Unit directions of the scanner rays, ring by ring
    """
    elevation = np.deg2rad(scene.elevations)[:, None]
    azimuth = np.deg2rad(scene.azimuths)[None, :]
    elevation, azimuth = np.broadcast_arrays(elevation, azimuth)
    return np.c_[
        (np.cos(elevation) * np.cos(azimuth)).ravel(),
        (np.cos(elevation) * np.sin(azimuth)).ravel(),
        np.sin(elevation).ravel()
    ]


def scan(scene):
    """
    Simulated LIDAR sweep with exact per point labels

    :param SceneSpec scene: scene
    :rtype: lidarRoads.pointcloud.PointCloud
    """
    directions = scanner_directions(scene)
    t, surface = cast_rays(
        np.zeros(3), directions, scene, max_range=scene.max_range
    )
    hit = surface != MISS
    t = t[hit]
    surface = surface[hit]
    directions = directions[hit]

    rng = np.random.default_rng(scene.seed)
    if scene.range_noise > 0:
        t = t + rng.normal(0., scene.range_noise, len(t))
    xyz = t[:, None] * directions

    reflectivity = np.zeros(len(t))
    for code, value in REFLECTIVITY.items():
        reflectivity[surface == code] = value
    if scene.reflectivity_noise > 0:
        reflectivity += rng.normal(0., scene.reflectivity_noise, len(t))
    reflectivity = np.clip(reflectivity, 0., 1.)

    labels = np.where(surface == ROAD_SURFACE, ROAD, NOT_ROAD)
    return PointCloud(xyz, reflectivity, labels)


##############################################################################
#                                                                            #
#                           Cameras and ground truth                         #
#                                                                            #
##############################################################################

def camera_matrices(scene, grid=None):
    """
    KITTI style calibration of the annotation camera: P2, R0_rect,
    Tr_velo_to_cam and the image size (width, height)
    """
    if grid is None:
        grid = GridSpec()
    R0_rect = np.eye(3)
    if scene.camera == 'forward':
        width, height = FORWARD_IMAGE
        cx, cy = FORWARD_PRINCIPAL_POINT
        focal = FORWARD_FOCAL
        # camera x right, y down, z forward
        rotation = np.array([[0., -1., 0.], [0., 0., -1.], [1., 0., 0.]])
        center = FORWARD_OFFSET
    else:
        # one pixel per cell on the road, image row 0 at x_max, column 0 at
        # y_max, pixel centres over cell centres
        width, height = grid.width_px, grid.height_px
        cx, cy = (width - 1) / 2., (height - 1) / 2.
        focal = TOPDOWN_FOCAL
        rotation = np.array([[0., -1., 0.], [-1., 0., 0.], [0., 0., -1.]])
        depth = focal * grid.cell_size
        center = np.r_[
            (grid.x_min + grid.x_max) / 2.,
            (grid.y_min + grid.y_max) / 2.,
            scene.road_level + depth
        ]
    P2 = np.array([
        [focal, 0., cx, 0.],
        [0., focal, cy, 0.],
        [0., 0., 1., 0.],
    ])
    Tr_velo_to_cam = np.c_[rotation, -rotation.dot(center)]
    return P2, R0_rect, Tr_velo_to_cam, width, height


def camera_calibration(scene, grid=None):
    P2, R0_rect, Tr, width, height = camera_matrices(scene, grid)
    return CameraCalibration.from_kitti(P2, R0_rect, Tr, width, height)


def render_annotation(scene, calib):
    """
    Perspective road annotation rendered by casting a ray through every
    pixel centre: Road where the first hit is the road surface, NotRoad
    elsewhere (sky included)

    :rtype: lidarRoads.annotation.PerspectiveAnnotation
    """
    M = calib.proj[:, :3]
    M_inv = np.linalg.inv(M)
    center = -M_inv.dot(calib.proj[:, 3])

    v, u = np.mgrid[0:calib.image_height, 0:calib.image_width]
    pixels = np.c_[u.ravel(), v.ravel(), np.ones(u.size)]
    directions = pixels.dot(M_inv.T)
    directions /= np.linalg.norm(directions, axis=1)[:, None]

    _, surface = cast_rays(center, directions, scene)
    road = (surface == ROAD_SURFACE).reshape(calib.image_shape)
    return PerspectiveAnnotation(road, np.ones_like(road))


def exact_topview(scene, grid=None, supersample=10):
    """
    Top-view truth from the scene geometry: each cell is sampled
    ``supersample`` x ``supersample`` times and is Road when at least half
    of its samples are on the road and outside every obstacle footprint.

    :rtype: numpy.ndarray
    :return: (height, width) int8 label image
    """
    if grid is None:
        grid = GridSpec()
    offsets = grid.cell_size * (
        (np.arange(supersample) + 0.5) / supersample - 0.5
    )
    ys = (grid.col_y[:, None] + offsets[None, :]).ravel()
    votes = np.zeros(grid.shape)
    # one image row at a time keeps the sample arrays small
    for row, x in enumerate(grid.row_x):
        xs = x + offsets
        X, Y = np.meshgrid(xs, ys, indexing='ij')
        road = scene.road_truth(X, Y).reshape(
            supersample, grid.width_px, supersample
        )
        votes[row] = road.sum(axis=(0, 2))
    label = np.where(2 * votes >= supersample ** 2, ROAD, NOT_ROAD)
    return label.astype(np.int8)


def generate(scene, grid=None):
    """
    Synthetic example with exact ground truth

    :param SceneSpec scene: scene
    :param lidarRoads.mesh.GridSpec grid: top-view grid of the truth
    :rtype: tuple
    :return: labeled PointCloud, top-view label, PerspectiveAnnotation,
        CameraCalibration
    """
    scene.validate()
    if grid is None:
        grid = GridSpec()
    cloud = scan(scene)
    truth = exact_topview(scene, grid)
    calib = camera_calibration(scene, grid)
    annotation = render_annotation(scene, calib)
    return cloud, truth, annotation, calib


##############################################################################
#                                                                            #
#                                 Data sets                                  #
#                                                                            #
##############################################################################

def random_scene(rng, base=None):
    """
    Draw a scene: a road with one bend, random width and up to two boxes
    """
    scene = SceneSpec() if base is None else base.copy()
    y0 = rng.uniform(-3., 3.)
    bend_x = rng.uniform(15., 40.)
    heading = rng.uniform(-0.25, 0.25)
    vertices = [
        (-20., y0),
        (bend_x, y0),
        (100., y0 + heading * (100. - bend_x)),
    ]
    scene.road_centerline = format_polyline(vertices)
    scene.road_width = float(rng.uniform(5.5, 9.))
    obstacles = []
    for _ in range(int(rng.integers(0, 3))):
        obstacles.append(ObstacleBox(
            center_x=float(rng.uniform(12., 40.)),
            center_y=float(rng.uniform(-8., 8.)),
            size_x=4., size_y=1.8, height=1.5,
            clearance=float(rng.choice([0., 0.3])),
        ))
    scene.obstacles = obstacles
    scene.seed = int(rng.integers(2**31))
    return scene


def synthetic_ids(count, categories=('um', 'umm', 'uu')):
    """KITTI shaped example ids, cycling through the categories"""
    counters = dict((c, 0) for c in categories)
    ids = []
    for i in range(count):
        category = categories[i % len(categories)]
        ids.append('{}_{:06d}'.format(category, counters[category]))
        counters[category] += 1
    return ids


def write_synthetic_dataset(root, count, seed=0, base=None, grid=None,
                            verbose=True):
    """
    Write a data root of synthetic examples: ``velodyne/`` (clouds),
    ``calib/`` (KITTI calibration), ``gt_image/`` (perspective annotation),
    ``topview_labels/`` (exact top-view truth), ``annotated/`` (exactly
    labeled, sector interpolated clouds) and ``scenes/`` (scene parameters)

    :param str root: data root
    :param int count: number of examples
    :param int seed: seed of the scene draws
    :param SceneSpec base: scanner and camera settings shared by the scenes
    :rtype: list
    :return: example ids
    """
    if grid is None:
        grid = GridSpec()
    rng = np.random.default_rng(seed)
    ids = synthetic_ids(count)
    report('Starting synthetic data set ({} examples)'.format(count), verbose)
    for example_id in ids:
        scene = random_scene(rng, base)
        cloud, truth, annotation, _ = generate(scene, grid)
        P2, R0_rect, Tr, _, _ = camera_matrices(scene, grid)

        save_velodyne_bin(
            cloud.with_labels(None),
            os.path.join(root, 'velodyne', example_id + '.bin')
        )
        save_labeled_cloud(
            densify_sectors(cloud),
            os.path.join(root, 'annotated', example_id + '.bin')
        )
        write_kitti_calibration(
            os.path.join(root, 'calib', example_id + '.txt'),
            P2, R0_rect, Tr
        )
        save_perspective_annotation(
            annotation, os.path.join(root, 'gt_image', example_id + '.png')
        )
        save_topview_label(
            truth, os.path.join(root, 'topview_labels', example_id + '.png')
        )
        scene.save(
            filename=example_id + '.json',
            directory=os.path.join(root, SCENE_DIRECTORY),
            verbose=False
        )
        report('   {}: {} points'.format(example_id, len(cloud)), verbose)
    report('   ... Done. Wrote {}'.format(root), verbose)
    return ids
