import os
import shutil
import tempfile
import unittest
import numpy as np
import properties

from lidarRoads import synthetic, annotation
from lidarRoads.synthetic import SceneSpec, ObstacleBox
from lidarRoads.mesh import GridSpec
from lidarRoads.pointcloud import ROAD, NOT_ROAD, UNKNOWN, load_velodyne_bin
from lidarRoads.utils import file_digest


TOL = 1e-9


def flat_scene(**kwargs):
    return SceneSpec(
        curb_height=0., range_noise=0., reflectivity_noise=0., **kwargs
    )


class TestScene(unittest.TestCase):

    def test_polyline(self):
        vertices = synthetic.parse_polyline("0,0; 10,0; 10,5")
        self.assertTrue(vertices.shape == (3, 2))
        d = synthetic.distance_to_polyline(
            np.r_[5., 12., -3.], np.r_[2., 3., 0.], vertices
        )
        self.assertTrue(np.allclose(d, [2., 2., 3.]))
        with self.assertRaises(properties.ValidationError):
            synthetic.parse_polyline("0,0")
        with self.assertRaises(properties.ValidationError):
            synthetic.parse_polyline("a,b; 1,2")

    def test_invalid_scene(self):
        with self.assertRaises(properties.ValidationError):
            SceneSpec(road_width=-1.).validate()
        with self.assertRaises(properties.ValidationError):
            ObstacleBox(clearance=2., height=1.5).validate()

    def test_scanner(self):
        scene = SceneSpec()
        self.assertTrue(len(scene.elevations) == 64)
        self.assertTrue(len(scene.azimuths) == 601)
        directions = synthetic.scanner_directions(scene)
        self.assertTrue(directions.shape == (64 * 601, 3))
        self.assertTrue(
            np.allclose(np.linalg.norm(directions, axis=1), 1., atol=1e-12)
        )


class TestScan(unittest.TestCase):

    def test_flat_ground(self):
        scene = flat_scene()
        cloud = synthetic.scan(scene)
        print(cloud, cloud.label_counts())
        self.assertTrue(len(cloud) > 10000)
        residual = np.abs(cloud.z - scene.road_level).max()
        print('ground residual: {:.2e}'.format(residual))
        self.assertTrue(residual < TOL)
        self.assertTrue(np.hypot(cloud.x, cloud.y).max() <= scene.max_range + TOL)

        # labels follow the road strip |y| <= 3.5
        on_road = np.abs(cloud.y) <= 3.5
        self.assertTrue(np.all(cloud.labels[on_road] == ROAD))
        self.assertTrue(np.all(cloud.labels[~on_road] == NOT_ROAD))

    def test_curb(self):
        scene = SceneSpec(range_noise=0., reflectivity_noise=0.)
        cloud = synthetic.scan(scene)
        road = cloud.labels == ROAD
        self.assertTrue(np.allclose(cloud.z[road], scene.road_level, atol=TOL))
        # off-road returns lie on the raised ground or the curb face
        off = ~road
        self.assertTrue(np.all(cloud.z[off] >= scene.road_level - TOL))
        self.assertTrue(np.all(cloud.z[off] <= scene.off_road_level + TOL))
        n_face = int(np.sum(cloud.z[off] < scene.off_road_level - 1e-6))
        print('points on the curb face: {}'.format(n_face))
        self.assertTrue(n_face > 0)

    def test_obstacle(self):
        box = ObstacleBox(center_x=15., center_y=0., size_x=4., size_y=2.,
                          height=1.5)
        scene = flat_scene(obstacles=[box])
        cloud = synthetic.scan(scene)
        above = cloud.z > scene.road_level + 0.01
        self.assertTrue(above.sum() > 100)
        self.assertTrue(np.all(cloud.labels[above] == NOT_ROAD))
        # nothing is seen behind the box at its height band
        hidden = box.footprint(cloud.x - 4., cloud.y) & ~above
        self.assertTrue(hidden.sum() == 0)

        truth = synthetic.exact_topview(scene)
        x, y = GridSpec().cell_centers_image()
        self.assertTrue(np.all(truth[box.footprint(x, y)] == NOT_ROAD))

    def test_regeneration_is_identical(self):
        scene = SceneSpec(range_noise=0.02, seed=11)
        a = synthetic.scan(scene)
        b = synthetic.scan(scene.copy())
        self.assertTrue(np.all(a.points == b.points))
        self.assertTrue(np.all(a.labels == b.labels))
        scene.seed = 12
        c = synthetic.scan(scene)
        self.assertTrue(np.any(c.points != a.points))

    def test_density_decreases_with_range(self):
        cloud = synthetic.scan(flat_scene(road_width=200.))
        r = np.hypot(cloud.x, cloud.y)
        edges = np.arange(5., 50., 5.)
        density = [
            np.sum((r >= r1) & (r < r2)) / (r2**2 - r1**2)
            for r1, r2 in zip(edges[:-1], edges[1:])
        ]
        print(np.round(density, 2))
        self.assertTrue(np.all(np.diff(density) < 0))


class TestGroundTruth(unittest.TestCase):

    def test_exact_topview(self):
        grid = GridSpec()
        truth = synthetic.exact_topview(flat_scene(), grid)
        self.assertTrue(truth.shape == grid.shape)
        self.assertTrue(np.all(truth != UNKNOWN))
        # the 7 m road covers 70 of the 200 columns
        self.assertTrue(np.all((truth == ROAD).sum(axis=1) == 70))

    def test_pcp_matches_truth(self):
        scene = SceneSpec(seed=3)
        grid = GridSpec()
        cloud, truth, ann, calib = synthetic.generate(scene, grid)
        pcp, _ = annotation.annotate_pcp(
            cloud.with_labels(None), calib, ann, grid
        )
        labeled = pcp != UNKNOWN
        agreement = np.mean(pcp[labeled] == truth[labeled])
        print('PCP agreement: {:.4f} over {} cells'.format(
            agreement, labeled.sum()
        ))
        self.assertTrue(agreement >= 0.99)

    def test_cameras(self):
        scene = SceneSpec()
        calib = synthetic.camera_calibration(scene)
        self.assertTrue(calib.image_shape == (375, 1242))
        # a point straight ahead on the camera axis projects on the
        # principal point
        u, v, w = calib.project([[30.27, 0., -0.08]])
        self.assertTrue(abs(u[0] - 609.5593) < 1e-6)
        self.assertTrue(abs(v[0] - 172.854) < 1e-6)
        self.assertTrue(abs(w[0] - 30.) < 1e-9)

        topdown = synthetic.camera_calibration(SceneSpec(camera='topdown'))
        self.assertTrue(topdown.image_shape == GridSpec().shape)


class TestDataset(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def test_ids(self):
        self.assertTrue(synthetic.synthetic_ids(4) == [
            'um_000000', 'umm_000000', 'uu_000000', 'um_000001'
        ])

    def test_write_dataset(self):
        base = SceneSpec(azimuth_step=1., n_rings=16, camera='topdown')
        roots = [os.path.join(self.directory, r) for r in ['a', 'b']]
        for root in roots:
            ids = synthetic.write_synthetic_dataset(
                root, 3, seed=7, base=base, verbose=False
            )
        self.assertTrue(ids == ['um_000000', 'umm_000000', 'uu_000000'])

        files = [
            os.path.join('velodyne', 'um_000000.bin'),
            os.path.join('annotated', 'um_000000.bin'),
            os.path.join('annotated', 'um_000000.lbl'),
            os.path.join('calib', 'um_000000.txt'),
            os.path.join('gt_image', 'um_000000.png'),
            os.path.join('topview_labels', 'um_000000.png'),
            os.path.join(synthetic.SCENE_DIRECTORY, 'um_000000.json'),
        ]
        for name in files:
            a, b = [os.path.join(root, name) for root in roots]
            self.assertTrue(os.path.isfile(a))
            self.assertTrue(file_digest(a) == file_digest(b))

        cloud = load_velodyne_bin(os.path.join(roots[0], files[0]))
        self.assertTrue(len(cloud) > 0)

    def tearDown(self):
        shutil.rmtree(self.directory)


if __name__ == '__main__':
    unittest.main()
