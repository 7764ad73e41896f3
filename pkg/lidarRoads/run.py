import os
import json
import time
import queue
import threading
import contextlib
import numpy as np
import properties
from collections import OrderedDict

from .base import (
    BaseLidarRoads, LoadableInstance, ConfigurationError, MissingExampleError,
    TrainingError, CheckpointVersionError
)
from .utils import report
from .mesh import GridSpec
from .model import ModelConfig, LoDNN
from .pointcloud import (
    load_velodyne_bin, load_labeled_cloud, augment, augmentation_parameters
)
from .rasterizer import rasterize_features
from .annotation import labels_to_topview, load_topview_label
from .tensor import backward, cross_entropy
from .optimizers import AdamState, adam_step, save_checkpoint, load_checkpoint
from . import evaluation


# Global variables (Filenames)
TRAINER_PARAMETERS_FILENAME = "TrainerParameters.json"
MANIFEST_FILENAME = "SplitManifest.json"
TRAINING_LOG_FILENAME = "training_log.csv"
CHECKPOINT_FILENAME = "best.ldnn"
LOG_HEADER = "epoch,train_loss,val_maxf,lr"

CATEGORIES = ['um', 'umm', 'uu']
VALIDATION_PER_CATEGORY = 10

# layout of a data root
VELODYNE_DIRECTORY = 'velodyne'
ANNOTATED_DIRECTORY = 'annotated'
TOPVIEW_LABEL_DIRECTORY = 'topview_labels'
CALIBRATION_DIRECTORY = 'calib'
GROUND_TRUTH_DIRECTORY = 'gt_image'

# batch prefetching
PREFETCH_THREAD_NAME = 'lidarRoads-prefetch'
PUT_TIMEOUT = 0.1  # seconds between checks of the stop flag


def example_category(example_id):
    """category prefix of an example id (um_000001 -> um)"""
    return example_id.split('_')[0]


def example_paths(data_root, example_id):
    """
    Files of an example in a data root
    """
    return {
        'velodyne': os.path.join(
            data_root, VELODYNE_DIRECTORY, example_id + '.bin'
        ),
        'annotated': os.path.join(
            data_root, ANNOTATED_DIRECTORY, example_id + '.bin'
        ),
        'topview_label': os.path.join(
            data_root, TOPVIEW_LABEL_DIRECTORY, example_id + '.png'
        ),
        'calib': os.path.join(
            data_root, CALIBRATION_DIRECTORY, example_id + '.txt'
        ),
        'gt_image': os.path.join(
            data_root, GROUND_TRUTH_DIRECTORY, example_id + '.png'
        ),
    }


def require_files(paths, example_id):
    for path in paths:
        if not os.path.isfile(path):
            raise MissingExampleError(
                'example {}: missing {}'.format(example_id, path),
                example_id=example_id
            )


##############################################################################
#                                                                            #
#                                   Splits                                   #
#                                                                            #
##############################################################################

class SplitManifest(BaseLidarRoads):
    """
    Train and validation example ids per category (um, umm, uu)
    """

    filename = properties.String(
        "filename to serialize properties to",
        default=MANIFEST_FILENAME
    )

    um_train = properties.List(
        "um training ids", prop=properties.String(""), default=list
    )
    umm_train = properties.List(
        "umm training ids", prop=properties.String(""), default=list
    )
    uu_train = properties.List(
        "uu training ids", prop=properties.String(""), default=list
    )
    um_validation = properties.List(
        "um validation ids", prop=properties.String(""), default=list
    )
    umm_validation = properties.List(
        "umm validation ids", prop=properties.String(""), default=list
    )
    uu_validation = properties.List(
        "uu validation ids", prop=properties.String(""), default=list
    )

    @properties.validator
    def _check_disjoint(self):
        overlap = set(self.train_ids()) & set(self.validation_ids())
        if overlap:
            raise properties.ValidationError(
                'ids both in train and validation: {}'.format(sorted(overlap))
            )

    def train_ids(self, category=None):
        categories = CATEGORIES if category is None else [category]
        return [
            i for c in categories for i in getattr(self, c + '_train')
        ]

    def validation_ids(self, category=None):
        categories = CATEGORIES if category is None else [category]
        return [
            i for c in categories for i in getattr(self, c + '_validation')
        ]

    def sizes(self):
        """{category: (n_train, n_validation)}"""
        return OrderedDict(
            (c, (len(self.train_ids(c)), len(self.validation_ids(c))))
            for c in CATEGORIES
        )

    @classmethod
    def from_directory(cls, data_root, seed=0,
                       validation_per_category=VALIDATION_PER_CATEGORY):
        """
        Split the examples found in ``data_root/velodyne`` by category
        """
        directory = os.path.join(data_root, VELODYNE_DIRECTORY)
        if not os.path.isdir(directory):
            raise MissingExampleError(
                'no {} directory in {}'.format(VELODYNE_DIRECTORY, data_root)
            )
        ids = OrderedDict((c, []) for c in CATEGORIES)
        for name in sorted(os.listdir(directory)):
            stem, ext = os.path.splitext(name)
            if ext == '.bin' and example_category(stem) in ids:
                ids[example_category(stem)].append(stem)
        return make_splits(ids, seed, validation_per_category)


def make_splits(example_ids, seed=0,
                validation_per_category=VALIDATION_PER_CATEGORY):
    """
    Seeded selection of ``validation_per_category`` validation ids per
    category; the remaining ids are for training.

    :param dict example_ids: category -> list of ids
    :param int seed: seed of the selection
    :rtype: SplitManifest
    """
    unknown = sorted(set(example_ids) - set(CATEGORIES))
    if unknown:
        raise ConfigurationError(
            'unknown categories {}, expected {}'.format(unknown, CATEGORIES)
        )
    rng = np.random.default_rng(seed)
    manifest = SplitManifest()
    for category in CATEGORIES:
        ids = sorted(example_ids.get(category, []))
        if len(ids) < validation_per_category:
            raise ConfigurationError(
                'category {} has {} examples, at least {} are needed for the '
                'validation set'.format(
                    category, len(ids), validation_per_category
                )
            )
        chosen = set(rng.choice(
            len(ids), size=validation_per_category, replace=False
        ).tolist())
        setattr(manifest, category + '_validation', [
            i for k, i in enumerate(ids) if k in chosen
        ])
        setattr(manifest, category + '_train', [
            i for k, i in enumerate(ids) if k not in chosen
        ])
    return manifest


##############################################################################
#                                                                            #
#                                 Training data                              #
#                                                                            #
##############################################################################

class TrainConfig(BaseLidarRoads):
    """
    Optimization parameters
    """

    filename = properties.String(
        "filename to serialize properties to",
        default="TrainConfig.json"
    )

    batch_size = properties.Integer("examples per batch", default=4)

    initial_lr = properties.Float("initial Adam learning rate", default=0.01)

    lr_decay_factor = properties.Float(
        "the learning rate is divided by this factor on a plateau",
        default=2.
    )

    plateau_window = properties.Integer(
        "epochs without validation improvement that trigger a decay",
        min=1, default=1
    )

    dropout = properties.Float(
        "spatial dropout probability used while training",
        min=0., max=1., default=0.25
    )

    max_epochs = properties.Integer("number of epochs", min=1, default=50)

    patience = properties.Integer(
        "stop after this many epochs without improvement (0: never)",
        min=0, default=10
    )

    seed = properties.Integer(
        "seed of the shuffling, dropout and initialization", default=0
    )

    augment = properties.Bool(
        "train on the 42 rotated and mirrored variants of each example",
        default=True
    )

    unknown = properties.StringChoice(
        "handling of Unknown pixels in the loss",
        default='mask',
        choices=['mask', 'not_road']
    )

    queue_depth = properties.Integer(
        "number of batches prepared ahead of the optimizer", min=1, default=2
    )

    validation_per_category = properties.Integer(
        "validation examples per category", min=0,
        default=VALIDATION_PER_CATEGORY
    )

    threads = properties.Integer(
        "threads used to rasterize", min=1, default=1
    )

    @properties.validator
    def _check_schedule(self):
        if self.batch_size < 1:
            raise properties.ValidationError(
                'batch_size must be at least 1, not {}'.format(self.batch_size)
            )
        if self.initial_lr <= 0:
            raise properties.ValidationError(
                'initial_lr must be positive, not {}'.format(self.initial_lr)
            )
        if self.lr_decay_factor <= 1:
            raise properties.ValidationError(
                'lr_decay_factor must be larger than 1, not {}'.format(
                    self.lr_decay_factor
                )
            )
        if not 0 <= self.dropout < 1:
            raise properties.ValidationError(
                'dropout must be in [0, 1), not {}'.format(self.dropout)
            )

    def learning_rate(self, n_decays):
        """learning rate after ``n_decays`` decays"""
        return self.initial_lr / self.lr_decay_factor ** n_decays


class RoadDataset(object):
    """
    Examples of a data root, with the augmented variants produced on the fly:
    example k is variant k % 42 of example k // 42.

    Inputs are rasterized from ``velodyne/<id>.bin``; labels of augmented
    examples come from the labeled cloud ``annotated/<id>.bin``, labels of
    unaugmented examples from ``topview_labels/<id>.png`` when
    ``augmented`` is False.

    :param str data_root: data root
    :param list ids: example ids
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :param bool augmented: expose the 42 variants of each example
    """

    def __init__(self, data_root, ids, grid, augmented=True, workers=1):
        self.data_root = data_root
        self.ids = list(ids)
        self.grid = grid
        self.augmented = augmented
        self.workers = workers
        self.variants = (
            augmentation_parameters() if augmented else [(0, False)]
        )
        self._clouds = {}
        for example_id in self.ids:
            paths = example_paths(data_root, example_id)
            needed = [paths['velodyne']]
            needed.append(
                paths['annotated'] if augmented else paths['topview_label']
            )
            require_files(needed, example_id)

    def __len__(self):
        return len(self.ids) * len(self.variants)

    def _clouds_of(self, example_id):
        # clouds are cached, the augmented variants are not
        if example_id not in self._clouds:
            paths = example_paths(self.data_root, example_id)
            cloud = load_velodyne_bin(paths['velodyne'])
            labeled = None
            if self.augmented:
                labeled = load_labeled_cloud(paths['annotated'])
            self._clouds[example_id] = (cloud, labeled)
        return self._clouds[example_id]

    def example(self, k):
        """
        Input (D, H, W) and label image (H, W) of example ``k``
        """
        example_id = self.ids[k // len(self.variants)]
        angle, mirrored = self.variants[k % len(self.variants)]
        cloud, labeled = self._clouds_of(example_id)
        features = rasterize_features(
            augment(cloud, angle, mirrored), self.grid, workers=self.workers
        )
        if self.augmented:
            label = labels_to_topview(
                augment(labeled, angle, mirrored), self.grid
            )
        else:
            label = load_topview_label(
                example_paths(self.data_root, example_id)['topview_label']
            )
        return features.data, label

    def batch(self, indices):
        examples = [self.example(k) for k in indices]
        return (
            np.stack([e[0] for e in examples]),
            np.stack([e[1] for e in examples])
        )


def epoch_order(n_examples, seed, epoch):
    """permutation of the examples of an epoch, seeded by (seed, epoch)"""
    return np.random.default_rng([seed, epoch]).permutation(n_examples)


def plateaued(history, val_maxf, window):
    """
    True when ``val_maxf`` does not improve on the validation MaxF of the
    previous ``window`` epochs, which triggers a learning rate decay
    """
    recent = history[-window:]
    return bool(recent) and val_maxf <= max(recent)


def _put(out, item, stop):
    """queue an item unless the consumer stops first"""
    while not stop.is_set():
        try:
            out.put(item, timeout=PUT_TIMEOUT)
            return True
        except queue.Full:
            pass
    return False


def _produce(dataset, batches, out, stop):
    try:
        for indices in batches:
            if stop.is_set() or not _put(
                out, ('batch', dataset.batch(indices)), stop
            ):
                return
        _put(out, ('done', None), stop)
    except Exception as err:
        _put(out, ('error', err), stop)


def prefetched_batches(dataset, batches, queue_depth=2):
    """
    Yield the batches in order while a producer thread prepares up to
    ``queue_depth`` batches ahead. The producer ends with the generator,
    also when the consumer stops early or raises.
    """
    out = queue.Queue(maxsize=queue_depth)
    stop = threading.Event()
    producer = threading.Thread(
        target=_produce, args=(dataset, batches, out, stop),
        name=PREFETCH_THREAD_NAME, daemon=True
    )
    producer.start()
    try:
        while True:
            kind, value = out.get()
            if kind == 'done':
                break
            if kind == 'error':
                raise value
            yield value
    finally:
        stop.set()
        producer.join()


def predict_dataset(model, dataset, batch_size=4):
    """
    Road confidence maps and labels of every example of a dataset
    """
    pairs = []
    for start in range(0, len(dataset), batch_size):
        x, y = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        confidence = model.predict(x)
        pairs += list(zip(confidence, y))
    return pairs


##############################################################################
#                                                                            #
#                                   Training                                 #
#                                                                            #
##############################################################################

class TrainingResult(object):

    def __init__(self, model, log, best_epoch, best_maxf, checkpoint):
        self.model = model
        self.log = log
        self.best_epoch = best_epoch
        self.best_maxf = best_maxf
        self.checkpoint = checkpoint


class Trainer(BaseLidarRoads):
    """
    Train the road detection network on the examples of a data root
    """

    filename = properties.String(
        "filename for the trainer parameters",
        default=TRAINER_PARAMETERS_FILENAME
    )

    data_root = properties.String("data root", required=True)

    grid = LoadableInstance(
        "top-view grid", GridSpec, default=GridSpec
    )

    model_config = LoadableInstance(
        "network architecture", ModelConfig, default=ModelConfig
    )

    train_config = LoadableInstance(
        "optimization parameters", TrainConfig, default=TrainConfig
    )

    manifest = LoadableInstance(
        "train and validation split", SplitManifest, required=True
    )

    log_filename = properties.String(
        "filename of the training log", default=TRAINING_LOG_FILENAME
    )

    checkpoint_filename = properties.String(
        "filename of the best checkpoint", default=CHECKPOINT_FILENAME
    )

    @properties.validator
    def _check_channels(self):
        if self.grid.n_channels != self.model_config.input_channels:
            raise properties.ValidationError(
                'the grid rasterizes {} channels ({}) but the model expects '
                '{}'.format(
                    self.grid.n_channels, self.grid.features,
                    self.model_config.input_channels
                )
            )

    def _sidecar(self, model_config, epoch, val_maxf):
        return {
            'model': model_config.serialize(),
            'train': self.train_config.serialize(),
            'grid': self.grid.serialize(),
            'epoch': epoch,
            'val_maxf': val_maxf,
        }

    def run(self, verbose=True):
        """
        Train, keeping the checkpoint of the best validation MaxF

        :rtype: TrainingResult
        """
        report('Validating parameters...', verbose)
        self.validate()
        self.save(verbose=verbose)

        config = self.train_config
        model_config = self.model_config.copy()
        model_config.dropout = config.dropout

        train_set = RoadDataset(
            self.data_root, self.manifest.train_ids(), self.grid,
            augmented=config.augment, workers=config.threads
        )
        if len(train_set) == 0:
            raise ConfigurationError('the manifest holds no training examples')
        validation_ids = self.manifest.validation_ids()
        if validation_ids:
            validation_set = RoadDataset(
                self.data_root, validation_ids, self.grid, augmented=False,
                workers=config.threads
            )
        else:
            # without validation examples, select on the training examples
            validation_set = RoadDataset(
                self.data_root, self.manifest.train_ids(), self.grid,
                augmented=False, workers=config.threads
            )

        model = LoDNN(model_config, seed=config.seed)
        state = AdamState(model.parameters, lr=config.initial_lr)

        log_path = os.path.join(self.directory, self.log_filename)
        checkpoint_path = os.path.join(self.directory, self.checkpoint_filename)
        with open(log_path, 'w') as f:
            f.write(LOG_HEADER + '\n')

        report('Starting training', verbose)
        report('   {} training examples ({} ids), {} validation ids'.format(
            len(train_set), len(train_set.ids), len(validation_set.ids)
        ), verbose)

        log = []
        history = []
        n_decays = 0
        best_maxf = -np.inf
        best_epoch = 0
        stale = 0
        step = 0
        t = time.time()

        for epoch in range(1, config.max_epochs + 1):
            state.lr = config.learning_rate(n_decays)
            order = epoch_order(len(train_set), config.seed, epoch)
            batches = [
                order[i:i + config.batch_size]
                for i in range(0, len(order), config.batch_size)
            ]

            losses = []
            with contextlib.closing(prefetched_batches(
                train_set, batches, config.queue_depth
            )) as prefetched:
                for x, y in prefetched:
                    step += 1
                    model.zero_grad()
                    probs = model.forward(
                        x, training=True, seed=config.seed, step=step
                    )
                    loss = cross_entropy(probs, y, unknown=config.unknown)
                    if not np.isfinite(loss.item()):
                        raise TrainingError(
                            'non-finite loss at step {}'.format(step),
                            step=step
                        )
                    backward(loss)
                    adam_step(model.parameters, state)
                    losses.append(loss.item())

            train_loss = float(np.mean(losses))
            val_maxf = evaluation.sweep(
                predict_dataset(model, validation_set, config.batch_size)
            ).max_f

            row = (epoch, train_loss, val_maxf, state.lr)
            log.append(row)
            with open(log_path, 'a') as f:
                f.write('{:d},{:.6f},{:.6f},{:.10g}\n'.format(*row))
            report(
                '   epoch {}: train loss {:.4f}, val MaxF {:.4f}, lr {:g}'.format(
                    *row
                ),
                verbose
            )

            if val_maxf > best_maxf:
                best_maxf = val_maxf
                best_epoch = epoch
                stale = 0
                save_checkpoint(checkpoint_path, model.parameters, state)
                with open(sidecar_filename(checkpoint_path), 'w') as f:
                    json.dump(
                        self._sidecar(model_config, epoch, val_maxf), f,
                        indent=2, sort_keys=True
                    )
            else:
                stale += 1

            if plateaued(history, val_maxf, config.plateau_window):
                n_decays += 1
            history.append(val_maxf)

            if config.patience and stale >= config.patience:
                report('   no improvement for {} epochs, stopping'.format(
                    stale
                ), verbose)
                break

        report('   ... Done. Elapsed time : {}'.format(time.time() - t), verbose)
        report('Saved {}'.format(checkpoint_path), verbose)
        return TrainingResult(model, log, best_epoch, best_maxf, checkpoint_path)


def train(manifest, config, data_root, grid=None, model_config=None,
          directory='.', verbose=True):
    """
    Train the road detection network

    :param SplitManifest manifest: train and validation ids
    :param TrainConfig config: optimization parameters
    :param str data_root: data root
    :param lidarRoads.mesh.GridSpec grid: top-view grid
    :param lidarRoads.model.ModelConfig model_config: architecture
    :param str directory: output directory (log, checkpoint)
    :rtype: TrainingResult
    """
    trainer = Trainer(
        data_root=data_root,
        manifest=manifest,
        train_config=config,
        grid=GridSpec() if grid is None else grid,
        model_config=ModelConfig() if model_config is None else model_config,
        directory=directory,
    )
    return trainer.run(verbose=verbose)


def read_training_log(filename):
    """
    Rows (epoch, train_loss, val_maxf, lr) of a training log
    """
    with open(filename, 'r') as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ConfigurationError(
            '{}: not a training log (header "{}")'.format(filename, LOG_HEADER)
        )
    rows = []
    for line in lines[1:]:
        epoch, loss, maxf, lr = line.split(',')
        rows.append((int(epoch), float(loss), float(maxf), float(lr)))
    return rows


##############################################################################
#                                                                            #
#                                  Inference                                 #
#                                                                            #
##############################################################################

def sidecar_filename(checkpoint):
    return os.path.splitext(checkpoint)[0] + '.json'


def load_model(checkpoint):
    """
    Network and grid of a checkpoint and its sidecar

    :rtype: tuple
    :return: LoDNN, GridSpec
    """
    sidecar = sidecar_filename(checkpoint)
    if not os.path.isfile(sidecar):
        raise MissingExampleError(
            'no model description {} next to {}'.format(sidecar, checkpoint)
        )
    with open(sidecar, 'r') as f:
        description = json.load(f)
    model_config = properties.HasProperties.deserialize(
        description['model'], trusted=True
    )
    grid = properties.HasProperties.deserialize(
        description['grid'], trusted=True
    )
    params, _ = load_checkpoint(checkpoint)
    model = LoDNN(model_config)
    model.load_parameters(params)
    return model, grid


class InferenceResult(object):
    """
    Road confidence map (height, width) and the inference time
    """

    def __init__(self, confidence, elapsed_ms):
        self.confidence = confidence
        self.elapsed_ms = elapsed_ms


def infer(checkpoint, cloud, grid=None, model=None):
    """
    Rasterize a cloud and return the road confidence map of the network

    :param str checkpoint: checkpoint file (with its .json sidecar)
    :param lidarRoads.pointcloud.PointCloud cloud: input cloud
    :param lidarRoads.mesh.GridSpec grid: grid, the checkpoint's by default
    :param lidarRoads.model.LoDNN model: an already loaded network
    :rtype: InferenceResult
    """
    if model is None:
        model, stored_grid = load_model(checkpoint)
        if grid is None:
            grid = stored_grid
    if grid is None:
        grid = GridSpec()
    if grid.n_channels != model.config.input_channels:
        raise CheckpointVersionError(
            'the grid rasterizes {} channels, the network of {} expects '
            '{}'.format(grid.n_channels, checkpoint, model.config.input_channels)
        )
    t = time.perf_counter()
    features = rasterize_features(cloud, grid)
    confidence = model.predict(features.data[None])[0]
    elapsed_ms = 1e3 * (time.perf_counter() - t)
    return InferenceResult(confidence, elapsed_ms)
