import os
import shutil
import tempfile
import unittest
import numpy as np

from lidarRoads import annotation
from lidarRoads.annotation import CameraCalibration, PerspectiveAnnotation
from lidarRoads.base import ContractError, MalformedFileError
from lidarRoads.evaluation import label_disagreement
from lidarRoads.mesh import GridSpec
from lidarRoads.pointcloud import PointCloud, ROAD, NOT_ROAD, UNKNOWN
from lidarRoads.synthetic import SceneSpec, ObstacleBox, generate


TOL = 1e-9


def small_camera():
    """
    Camera at the LIDAR origin looking along x, f = 100 px, principal
    point (5, 5), 11 x 11 pixels. (10, 0, 0) lands on pixel (5, 5):
    [5, -100, 0, 0; 5, 0, -100, 0; 1, 0, 0, 0] . [10, 0, 0, 1] = [50, 50, 10]
    """
    proj = np.array([
        [5., -100., 0., 0.],
        [5., 0., -100., 0.],
        [1., 0., 0., 0.],
    ])
    return CameraCalibration(proj, 11, 11)


class TestProjection(unittest.TestCase):

    def setUp(self):
        self.calib = small_camera()
        road = np.zeros((11, 11), dtype=bool)
        road[5, 5] = True
        self.annotation = PerspectiveAnnotation(road)

    def test_project(self):
        u, v, w = self.calib.project([[10., 0., 0.]])
        self.assertTrue(abs(u[0] - 5.) < TOL and abs(v[0] - 5.) < TOL)
        self.assertTrue(w[0] == 10.)

    def test_point_labels(self):
        cloud = PointCloud(
            [[10., 0., 0.], [10., 0.1, 0.], [-10., 0., 0.], [10., 5., 0.]],
            np.zeros(4)
        )
        labeled = annotation.project_points(cloud, self.calib, self.annotation)
        print(labeled.labels)
        # on the road pixel, one pixel left, behind the camera, off the image
        self.assertTrue(
            np.all(labeled.labels == [ROAD, NOT_ROAD, UNKNOWN, UNKNOWN])
        )
        self.assertTrue(labeled.stats['degenerate_projections'] == 0)

    def test_degenerate_projection(self):
        cloud = PointCloud([[0., 1., 1.]], [0.])
        labeled = annotation.project_points(cloud, self.calib, self.annotation)
        self.assertTrue(labeled.labels[0] == UNKNOWN)
        self.assertTrue(labeled.stats['degenerate_projections'] == 1)

    def test_invalid_pixels(self):
        valid = np.ones((11, 11), dtype=bool)
        valid[5, 4] = False
        ann = PerspectiveAnnotation(np.zeros((11, 11), dtype=bool), valid)
        labels = ann.sample(np.r_[4., 4.4, 6.], np.r_[5., 5., 5.])
        self.assertTrue(np.all(labels == [UNKNOWN, UNKNOWN, NOT_ROAD]))

    def test_road_outside_valid(self):
        road = np.ones((3, 3), dtype=bool)
        with self.assertRaises(ContractError):
            PerspectiveAnnotation(road, np.zeros((3, 3), dtype=bool))

    def test_shape_mismatch(self):
        ann = PerspectiveAnnotation(np.zeros((5, 5), dtype=bool))
        with self.assertRaises(ContractError):
            annotation.project_points(
                PointCloud([[1., 0., 0.]], [0.]), self.calib, ann
            )


class TestDensify(unittest.TestCase):

    def test_fill_gap(self):
        cloud = PointCloud(
            [[10., 0., -1.], [11., 0., -1.]], [0.2, 0.4], labels=[ROAD, ROAD]
        )
        dense = annotation.densify_sectors(cloud)
        print(dense.xyz[:, 0])
        self.assertTrue(len(dense) == 11)
        self.assertTrue(np.all(dense.xyz[:2] == cloud.xyz))
        self.assertTrue(np.allclose(dense.x[2:], 10.1 + 0.1 * np.arange(9)))
        self.assertTrue(np.allclose(dense.reflectivity[2:], 0.2 + 0.02 * np.arange(1, 10)))
        self.assertTrue(np.all(dense.labels == ROAD))
        self.assertTrue(np.all(dense.z == -1.))

    def test_no_fill_across_labels(self):
        cloud = PointCloud(
            [[10., 0., -1.], [11., 0., -1.]], [0.2, 0.4],
            labels=[ROAD, NOT_ROAD]
        )
        self.assertTrue(len(annotation.densify_sectors(cloud)) == 2)

    def test_no_fill_over_large_gaps(self):
        cloud = PointCloud([[10., 0., -1.], [13., 0., -1.]], [0.2, 0.4])
        self.assertTrue(len(annotation.densify_sectors(cloud)) == 2)

    def test_no_fill_across_sectors(self):
        # azimuths 0.1 and -0.1 degrees fall in different sectors
        a = np.deg2rad(0.1)
        cloud = PointCloud(
            [[10. * np.cos(a), 10. * np.sin(a), -1.],
             [11. * np.cos(a), -11. * np.sin(a), -1.]],
            [0.2, 0.4]
        )
        self.assertTrue(len(annotation.densify_sectors(cloud)) == 2)

    def test_rays(self):
        # points along three rays, elevation and reflectivity linear in range
        rng = np.random.default_rng(8)
        azimuths = np.deg2rad([0.05, 10.05, -20.05])
        ray = np.repeat(np.arange(3), 30)
        r = rng.uniform(5., 40., len(ray))
        xyz = np.c_[
            r * np.cos(azimuths[ray]), r * np.sin(azimuths[ray]),
            -1.7 + 0.02 * r
        ]
        labels = np.where(r < 20., ROAD, NOT_ROAD)
        perm = rng.permutation(len(ray))
        cloud = PointCloud(xyz[perm], 0.01 * r[perm], labels=labels[perm])

        dense = annotation.densify_sectors(cloud)
        n = len(cloud)
        print('{} points, {} inserted'.format(n, len(dense) - n))
        self.assertTrue(len(dense) > n)
        # the input comes first, unchanged and in order
        self.assertTrue(np.all(dense.points[:n] == cloud.points))
        self.assertTrue(np.all(dense.labels[:n] == cloud.labels))

        inserted = dense.subset(np.arange(n, len(dense)))
        rr = np.hypot(inserted.x, inserted.y)
        angle = np.arctan2(inserted.y, inserted.x)
        nearest = np.abs(angle[:, None] - azimuths[None, :]).min(axis=1)
        self.assertTrue(nearest.max() < 1e-9)
        self.assertTrue(np.abs(inserted.z - (-1.7 + 0.02 * rr)).max() < TOL)
        self.assertTrue(
            np.abs(inserted.reflectivity - 0.01 * rr).max() < TOL
        )
        self.assertTrue(rr.min() > r.min() and rr.max() < r.max())
        self.assertTrue(np.all(
            inserted.labels == np.where(rr < 20., ROAD, NOT_ROAD)
        ))


class TestTopViewLabels(unittest.TestCase):

    def test_majority(self):
        grid = GridSpec()
        cloud = PointCloud(
            [
                # tie: Road
                [20.05, 0.05, 0.], [20.05, 0.05, 0.],
                # one Road, two NotRoad: NotRoad
                [30.05, 0.05, 0.], [30.05, 0.05, 0.], [30.05, 0.05, 0.],
                # only Unknown points: Unknown
                [40.05, 0.05, 0.],
            ],
            np.zeros(6),
            labels=[ROAD, NOT_ROAD, ROAD, NOT_ROAD, NOT_ROAD, UNKNOWN]
        )
        label = annotation.labels_to_topview(cloud, grid)
        rows, cols, _ = grid.pixel_index(
            np.r_[20.05, 30.05, 40.05], np.r_[0.05, 0.05, 0.05]
        )
        self.assertTrue(label.shape == grid.shape)
        self.assertTrue(np.all(label[rows, cols] == [ROAD, NOT_ROAD, UNKNOWN]))
        self.assertTrue((label != UNKNOWN).sum() == 2)

    def test_unlabeled_cloud(self):
        with self.assertRaises(ContractError):
            annotation.labels_to_topview(
                PointCloud([[20., 0., 0.]], [0.]), GridSpec()
            )


class TestFiles(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def test_kitti_calibration(self):
        P2 = np.array([[700., 0., 600., 45.], [0., 700., 170., -0.3],
                       [0., 0., 1., 0.005]])
        R0 = np.eye(3) + 0.001 * np.arange(9).reshape(3, 3)
        Tr = np.array([[0., -1., 0., 0.], [0., 0., -1., -0.08],
                       [1., 0., 0., -0.27]])
        filename = os.path.join(self.directory, 'calib', 'um_000000.txt')
        annotation.write_kitti_calibration(filename, P2, R0, Tr)
        calib = annotation.load_kitti_calibration(filename, 1242, 375)
        expected = CameraCalibration.from_kitti(P2, R0, Tr, 1242, 375)
        self.assertTrue(np.allclose(calib.proj, expected.proj, rtol=1e-11))
        self.assertTrue(calib.image_shape == (375, 1242))

    def test_incomplete_calibration(self):
        filename = os.path.join(self.directory, 'calib.txt')
        with open(filename, 'w') as f:
            f.write('P2: 1 0 0 0 0 1 0 0 0 0 1 0\n')
        with self.assertRaises(MalformedFileError):
            annotation.load_kitti_calibration(filename, 10, 10)

    def test_perspective_annotation_png(self):
        rng = np.random.default_rng(0)
        valid = rng.uniform(size=(30, 40)) > 0.2
        road = valid & (rng.uniform(size=(30, 40)) > 0.5)
        filename = os.path.join(self.directory, 'gt.png')
        annotation.save_perspective_annotation(
            PerspectiveAnnotation(road, valid), filename
        )
        loaded = annotation.load_perspective_annotation(filename)
        self.assertTrue(np.all(loaded.road_mask == road))
        self.assertTrue(np.all(loaded.valid_mask == valid))

    def test_topview_label_png(self):
        rng = np.random.default_rng(1)
        label = rng.choice([ROAD, NOT_ROAD, UNKNOWN], (40, 20)).astype(np.int8)
        filename = os.path.join(self.directory, 'label.png')
        annotation.save_topview_label(label, filename)
        self.assertTrue(np.all(annotation.load_topview_label(filename) == label))

    def tearDown(self):
        shutil.rmtree(self.directory)


class TestMappings(unittest.TestCase):

    grid = GridSpec()

    def footprint(self, box):
        x, y = self.grid.cell_centers_image()
        return box.footprint(x, y)

    def test_flat_world_agreement(self):
        scene = SceneSpec(
            curb_height=0., camera='topdown', range_noise=0.,
            reflectivity_noise=0.
        )
        cloud, truth, ann, calib = generate(scene, self.grid)
        pcp, dense = annotation.annotate_pcp(
            cloud.with_labels(None), calib, ann, self.grid
        )
        ipm = annotation.ipm_topview(ann, calib, self.grid, scene.road_level)

        known = (pcp != UNKNOWN) & (ipm != UNKNOWN)
        print('cells labeled by both mappings: {}'.format(known.sum()))
        self.assertTrue(known.sum() > 1000)
        self.assertTrue(label_disagreement(pcp, ipm) == 0)
        self.assertTrue(len(dense) > len(cloud))

        # and both agree with the exact truth
        labeled = pcp != UNKNOWN
        agreement = np.mean(pcp[labeled] == truth[labeled])
        print('PCP agreement with the exact truth: {:.4f}'.format(agreement))
        self.assertTrue(agreement >= 0.99)

    def test_raised_obstacle(self):
        box = ObstacleBox(
            center_x=20.03, center_y=0., size_x=4., size_y=1.8, height=1.5,
            clearance=0.3
        )
        scene = SceneSpec(
            curb_height=0., camera='forward', range_noise=0.,
            reflectivity_noise=0., obstacles=[box]
        )
        cloud, truth, ann, calib = generate(scene, self.grid)
        pcp, _ = annotation.annotate_pcp(
            cloud.with_labels(None), calib, ann, self.grid
        )
        ipm = annotation.ipm_topview(ann, calib, self.grid, scene.road_level)

        footprint = self.footprint(box)
        self.assertTrue(np.all(truth[footprint] == NOT_ROAD))
        n_pcp = int((pcp[footprint] == NOT_ROAD).sum())
        n_ipm = int((ipm[footprint] == ROAD).sum())
        print('footprint cells: PCP NotRoad {}, IPM Road {}'.format(
            n_pcp, n_ipm
        ))
        # the body is seen by the points, IPM sees the road under it
        self.assertTrue(n_pcp >= 1)
        self.assertTrue(n_ipm >= 1)
        self.assertTrue(label_disagreement(pcp, ipm) > 0)


if __name__ == '__main__':
    unittest.main()
