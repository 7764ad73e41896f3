from . import pointcloud
from . import annotation
from . import tensor
from . import optimizers
from . import evaluation
from . import synthetic
from . import run
from .mesh import GridSpec
from .pointcloud import PointCloud, load_velodyne_bin, augmentation_set
from .rasterizer import TopViewTensor, rasterize, rasterize_occupancy
from .annotation import (
    CameraCalibration, PerspectiveAnnotation, project_points,
    densify_sectors, labels_to_topview, ipm_topview, annotate_pcp
)
from .model import ModelConfig, LayerSpec, LoDNN, build_lodnn, receptive_field
from .run import TrainConfig, SplitManifest, make_splits, train, infer
from .evaluation import confusion, sweep, roi_study, compare_mappings
from .synthetic import SceneSpec, ObstacleBox, generate
from .view import plot_pr_curve, plot_topview
from .utils import load_properties

from .info import (
    __version__, __author__, __license__, __copyright__
)
