import os
import shutil
import tempfile
import threading
import unittest
import contextlib
import numpy as np
import properties

from lidarRoads import run, synthetic
from lidarRoads.run import TrainConfig, SplitManifest, RoadDataset, Trainer
from lidarRoads.mesh import GridSpec
from lidarRoads.model import ModelConfig
from lidarRoads.pointcloud import load_velodyne_bin, UNKNOWN
from lidarRoads.base import (
    ConfigurationError, MissingExampleError, CheckpointVersionError
)
from lidarRoads.utils import file_digest


def small_grid(**kwargs):
    return GridSpec(x_min=6., x_max=9.2, y_min=-1.6, y_max=1.6, **kwargs)


def small_model(**kwargs):
    return ModelConfig(encoder_maps=4, context_maps=4, decoder_maps=4, **kwargs)


def write_dataset(root, count=6, seed=0):
    base = synthetic.SceneSpec(n_rings=32, azimuth_step=0.5, camera='topdown')
    return synthetic.write_synthetic_dataset(
        root, count, seed=seed, base=base, grid=small_grid(), verbose=False
    )


class TestSplits(unittest.TestCase):

    def test_split_sizes(self):
        ids = dict(
            (c, ['{}_{:06d}'.format(c, i) for i in range(n)])
            for c, n in [('um', 95), ('umm', 96), ('uu', 98)]
        )
        manifest = run.make_splits(ids, seed=0)
        manifest.validate()
        sizes = manifest.sizes()
        print(sizes)
        self.assertTrue(sizes['um'] == (85, 10))
        self.assertTrue(sizes['umm'] == (86, 10))
        self.assertTrue(sizes['uu'] == (88, 10))
        self.assertTrue(len(manifest.train_ids()) == 259)

        again = run.make_splits(ids, seed=0)
        self.assertTrue(again.validation_ids() == manifest.validation_ids())
        other = run.make_splits(ids, seed=1)
        self.assertTrue(other.validation_ids() != manifest.validation_ids())

    def test_bad_splits(self):
        with self.assertRaises(ConfigurationError):
            run.make_splits({'um': ['um_000000'] * 3, 'umm': [], 'uu': []})
        with self.assertRaises(ConfigurationError):
            run.make_splits({'xx': ['xx_000000']}, validation_per_category=0)

    def test_overlap(self):
        manifest = SplitManifest(
            um_train=['um_000000'], um_validation=['um_000000']
        )
        with self.assertRaises(properties.ValidationError):
            manifest.validate()


class TestSchedule(unittest.TestCase):

    def test_learning_rate(self):
        config = TrainConfig()
        self.assertTrue(config.learning_rate(0) == 0.01)
        self.assertTrue(abs(config.learning_rate(3) - 0.00125) < 1e-15)

    def test_invalid_config(self):
        with self.assertRaises(properties.ValidationError):
            TrainConfig(lr_decay_factor=1.).validate()
        with self.assertRaises(properties.ValidationError):
            TrainConfig(batch_size=0).validate()

    def decayed_rates(self, config, values):
        """learning rate of each epoch for a series of validation MaxF"""
        history, n_decays, rates = [], 0, []
        for value in values:
            rates.append(config.learning_rate(n_decays))
            if run.plateaued(history, value, config.plateau_window):
                n_decays += 1
            history.append(value)
        return rates

    def test_plateau_decay(self):
        config = TrainConfig()
        improving = self.decayed_rates(config, [0.5, 0.6, 0.7, 0.8, 0.9])
        self.assertTrue(improving == [0.01] * 5)

        flat = self.decayed_rates(config, [0.5] * 4)
        print(flat)
        self.assertTrue(flat == [0.01, 0.01, 0.005, 0.0025])

        # a drop is a plateau, beating the last two epochs is not
        config = TrainConfig(plateau_window=2)
        self.assertTrue(run.plateaued([0.5, 0.7], 0.6, 2))
        self.assertTrue(not run.plateaued([0.7, 0.5, 0.6], 0.65, 2))
        self.assertTrue(not run.plateaued([], 0.1, 2))
        rates = self.decayed_rates(config, [0.7, 0.5, 0.6, 0.65])
        self.assertTrue(rates == [0.01, 0.01, 0.005, 0.0025])

    def test_epoch_order(self):
        first = run.epoch_order(100, seed=0, epoch=1)
        self.assertTrue(np.all(np.sort(first) == np.arange(100)))
        self.assertTrue(np.all(first == run.epoch_order(100, 0, 1)))
        self.assertTrue(np.any(first != run.epoch_order(100, 0, 2)))


class ListDataset(object):

    def __init__(self, fail_at=None):
        self.fail_at = fail_at

    def batch(self, indices):
        if self.fail_at in indices:
            raise ValueError('bad example {}'.format(self.fail_at))
        return list(indices)


class TestPrefetch(unittest.TestCase):

    def test_order(self):
        batches = [[0, 1], [2, 3], [4, 5], [6]]
        out = list(run.prefetched_batches(ListDataset(), batches, 1))
        self.assertTrue(out == batches)

    def test_error(self):
        batches = [[0, 1], [2, 3], [4, 5]]
        seen = []
        with self.assertRaises(ValueError):
            for b in run.prefetched_batches(ListDataset(fail_at=4), batches):
                seen.append(b)
        self.assertTrue(seen == [[0, 1], [2, 3]])

    def producers(self):
        return [
            t for t in threading.enumerate()
            if t.name == run.PREFETCH_THREAD_NAME and t.is_alive()
        ]

    def test_early_close(self):
        batches = [[i] for i in range(100)]
        out = run.prefetched_batches(ListDataset(), batches, 2)
        self.assertTrue(next(out) == [0])
        self.assertTrue(len(self.producers()) == 1)
        out.close()
        self.assertTrue(len(self.producers()) == 0)

    def test_consumer_error(self):
        batches = [[i] for i in range(100)]
        with self.assertRaises(RuntimeError):
            with contextlib.closing(
                run.prefetched_batches(ListDataset(), batches, 2)
            ) as out:
                for b in out:
                    raise RuntimeError('stop at {}'.format(b))
        self.assertTrue(len(self.producers()) == 0)


class TestTraining(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.root = tempfile.mkdtemp()
        cls.ids = write_dataset(cls.root)
        cls.manifest = SplitManifest.from_directory(
            cls.root, seed=0, validation_per_category=1
        )

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root)

    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def config(self, **kwargs):
        values = dict(batch_size=2, max_epochs=2, augment=False, patience=0)
        values.update(kwargs)
        return TrainConfig(**values)

    def train(self, directory, **kwargs):
        return run.train(
            self.manifest, self.config(**kwargs), self.root,
            grid=small_grid(), model_config=small_model(),
            directory=directory, verbose=False
        )

    def test_manifest(self):
        self.assertTrue(self.manifest.sizes()['um'] == (1, 1))
        self.assertTrue(len(self.manifest.train_ids()) == 3)

    def test_dataset(self):
        grid = small_grid()
        dataset = RoadDataset(self.root, self.manifest.train_ids(), grid)
        self.assertTrue(len(dataset) == 3 * 42)
        x, y = dataset.batch([0, 41, 42])
        self.assertTrue(x.shape == (3, 6, 32, 32))
        self.assertTrue(y.shape == (3, 32, 32))
        self.assertTrue(x.min() >= 0 and x.max() <= 1)
        self.assertTrue(np.any(y != UNKNOWN))

        plain = RoadDataset(
            self.root, self.manifest.validation_ids(), grid, augmented=False
        )
        self.assertTrue(len(plain) == 3)

        with self.assertRaises(MissingExampleError):
            RoadDataset(self.root, ['um_000099'], grid)

    def test_train(self):
        result = self.train(self.directory)
        log_file = os.path.join(self.directory, run.TRAINING_LOG_FILENAME)
        with open(log_file) as f:
            self.assertTrue(f.readline().strip() == run.LOG_HEADER)

        rows = run.read_training_log(log_file)
        print(rows)
        self.assertTrue([r[0] for r in rows] == [1, 2])
        self.assertTrue(all(np.isfinite(r[1]) for r in rows))
        self.assertTrue(all(0 <= r[2] <= 1 for r in rows))
        self.assertTrue(rows[0][3] == 0.01)
        self.assertTrue(abs(result.best_maxf - max(r[2] for r in rows)) < 1e-6)
        self.assertTrue(len(result.log) == 2)

        self.assertTrue(os.path.isfile(result.checkpoint))
        self.assertTrue(os.path.isfile(run.sidecar_filename(result.checkpoint)))
        self.assertTrue(os.path.isfile(
            os.path.join(self.directory, run.TRAINER_PARAMETERS_FILENAME)
        ))

        model, grid = run.load_model(result.checkpoint)
        self.assertTrue(grid.shape == (32, 32))

        cloud = load_velodyne_bin(
            run.example_paths(self.root, self.ids[0])['velodyne']
        )
        inferred = run.infer(result.checkpoint, cloud)
        print('inference: {:.1f} ms'.format(inferred.elapsed_ms))
        self.assertTrue(inferred.confidence.shape == (32, 32))
        self.assertTrue(inferred.confidence.min() >= 0)
        self.assertTrue(inferred.confidence.max() <= 1)
        self.assertTrue(inferred.elapsed_ms >= 0)

        with self.assertRaises(CheckpointVersionError):
            run.infer(
                result.checkpoint, cloud, grid=small_grid(features='occupancy')
            )

    def test_deterministic(self):
        directories = [os.path.join(self.directory, d) for d in ['a', 'b']]
        for directory in directories:
            self.train(directory, max_epochs=1)
        for name in [run.TRAINING_LOG_FILENAME, run.CHECKPOINT_FILENAME]:
            a, b = [os.path.join(d, name) for d in directories]
            self.assertTrue(file_digest(a) == file_digest(b))

    def test_channel_mismatch(self):
        trainer = Trainer(
            data_root=self.root, manifest=self.manifest,
            grid=small_grid(features='occupancy'), model_config=small_model()
        )
        with self.assertRaises(properties.ValidationError):
            trainer.validate()

    def test_missing_sidecar(self):
        result = self.train(self.directory, max_epochs=1)
        os.remove(run.sidecar_filename(result.checkpoint))
        with self.assertRaises(MissingExampleError):
            run.load_model(result.checkpoint)


if __name__ == '__main__':
    unittest.main()
