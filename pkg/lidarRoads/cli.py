import os
import re
import sys
import difflib
import argparse
import properties

from .info import __version__
from .base import (
    LidarRoadsError, ConfigurationError, DataError, ContractError,
    TrainingError, read_config, parse_config_lines, apply_config, config_lines
)
from .mesh import GridSpec
from .model import ModelConfig, architecture_table
from .run import (
    TrainConfig, SplitManifest, Trainer, RoadDataset, load_model, infer,
    predict_dataset, example_paths, require_files
)
from .evaluation import (
    EvaluationConfig, sweep, roi_study, compare_mappings, metrics_table,
    roi_table, comparison_table, write_table, write_pr_curve
)
from .synthetic import SceneSpec, write_synthetic_dataset
from .pointcloud import load_velodyne_bin, save_labeled_cloud
from .rasterizer import (
    TopViewTensor, rasterize_features, save_topview, export_channel_png
)
from .annotation import (
    annotate_pcp, ipm_topview, load_kitti_calibration,
    load_perspective_annotation, save_topview_label
)
from .utils import load_properties
from . import view


DATA_ROOT_VARIABLE = 'LODNN_DATA_ROOT'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

COMMANDS = [
    'rasterize', 'annotate', 'synth', 'train', 'infer', 'eval', 'roi-study',
    'compare-mappings', 'rf-table'
]

# configuration sections and the objects they configure
SECTIONS = ['grid', 'model', 'train', 'eval', 'synth']


class UsageError(LidarRoadsError):
    pass


class LidarRoadsParser(argparse.ArgumentParser):
    """
    Argument parser whose errors are raised (exit status 1) with a
    suggestion for mistyped commands and options
    """

    def parse_known_args(self, args=None, namespace=None):
        if args is not None:
            self._command_line = list(args)
        return super(LidarRoadsParser, self).parse_known_args(args, namespace)

    def option_strings(self):
        """
        Options of this parser and of the command named on the command line
        (of every command when none is named)
        """
        commands = {}
        for action in self._actions:
            if isinstance(action, argparse._SubParsersAction):
                commands.update(action.choices)
        named = [
            c for c in getattr(self, '_command_line', []) if c in commands
        ]
        parsers = [self]
        parsers += [commands[named[0]]] if named else list(commands.values())
        return [
            o for parser in parsers for action in parser._actions
            for o in action.option_strings
        ]

    def error(self, message):
        suggestion = None
        match = re.search(r"invalid choice: '([^']*)'", message)
        if match:
            suggestion = difflib.get_close_matches(match.group(1), COMMANDS, 1)
        match = re.search(r'unrecognized arguments: (\S+)', message)
        if match:
            suggestion = difflib.get_close_matches(
                match.group(1), self.option_strings(), 1
            )
        if suggestion:
            message = '{} (did you mean "{}"?)'.format(message, suggestion[0])
        raise UsageError('{}\n{}'.format(self.format_usage().strip(), message))


##############################################################################
#                                                                            #
#                                Configuration                               #
#                                                                            #
##############################################################################

def default_configuration():
    return dict([
        ('grid', GridSpec()),
        ('model', ModelConfig()),
        ('train', TrainConfig()),
        ('eval', EvaluationConfig()),
        ('synth', SceneSpec()),
    ])


def resolve_configuration(config_file=None, overrides=None, seed=None,
                          threads=None):
    """
    Default parameters updated by a configuration file, then by
    ``section.key=value`` overrides, then by the seed and thread flags

    :rtype: dict
    :return: section -> parameter object
    """
    values = {}
    if config_file is not None:
        values = read_config(config_file)
    if overrides:
        for section, pairs in parse_config_lines(
            overrides, source='--set'
        ).items():
            values.setdefault(section, {}).update(pairs)

    unknown = sorted(set(values) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(
            'unknown configuration sections {} (known: {})'.format(
                unknown, ', '.join(SECTIONS)
            )
        )

    config = default_configuration()
    for section in SECTIONS:
        apply_config(config[section], values.get(section, {}), section)

    # the network reads what the grid rasterizes unless told otherwise
    if 'input_channels' not in values.get('model', {}):
        config['model'].input_channels = config['grid'].n_channels

    if seed is not None:
        config['train'].seed = seed
        config['synth'].seed = seed
    if threads is not None:
        config['train'].threads = threads

    for section in SECTIONS:
        try:
            config[section].validate()
        except properties.ValidationError as err:
            raise ConfigurationError('{}: {}'.format(section, err))
    return config


def print_configuration(config, sections):
    print('# resolved configuration')
    for section in sections:
        for line in config_lines(config[section], section):
            print(line)


def data_root(args):
    root = args.data_root or os.environ.get(DATA_ROOT_VARIABLE)
    if root is None:
        raise ConfigurationError(
            'no data root: pass --data-root or set {}'.format(
                DATA_ROOT_VARIABLE
            )
        )
    return root


def split_ids(args, root, config):
    """example ids selected by --ids, --split and the manifest"""
    if args.ids:
        return [i for i in args.ids.split(',') if i]
    if args.manifest is not None:
        manifest = load_properties(args.manifest)
    else:
        manifest = SplitManifest.from_directory(
            root, seed=config['train'].seed,
            validation_per_category=config['train'].validation_per_category
        )
    if args.split == 'train':
        return manifest.train_ids()
    if args.split == 'validation':
        return manifest.validation_ids()
    return sorted(manifest.train_ids() + manifest.validation_ids())


##############################################################################
#                                                                            #
#                                  Commands                                  #
#                                                                            #
##############################################################################

def cmd_rasterize(args, config):
    print_configuration(config, ['grid'])
    cloud = load_velodyne_bin(args.input, verbose=True)
    tensor = rasterize_features(
        cloud, config['grid'], workers=config['train'].threads
    )
    save_topview(tensor, args.output)
    print('Saved {}'.format(args.output))
    if args.png_dir is not None:
        for i, name in enumerate(tensor.channel_names):
            export_channel_png(
                tensor, i, os.path.join(args.png_dir, name + '.png')
            )
    return EXIT_OK


def cmd_annotate(args, config):
    print_configuration(config, ['grid'])
    root = data_root(args)
    paths = example_paths(root, args.id)
    require_files(
        [paths['velodyne'], paths['calib'], paths['gt_image']], args.id
    )
    annotation = load_perspective_annotation(paths['gt_image'])
    height, width = annotation.shape
    calib = load_kitti_calibration(paths['calib'], width, height)
    grid = config['grid']
    out = args.output

    if args.mapping in ('pcp', 'both'):
        cloud = load_velodyne_bin(paths['velodyne'])
        label, dense = annotate_pcp(cloud, calib, annotation, grid, verbose=True)
        save_topview_label(label, os.path.join(out, args.id + '_pcp.png'))
        save_labeled_cloud(dense, os.path.join(out, args.id + '.bin'))
    if args.mapping in ('ipm', 'both'):
        label = ipm_topview(annotation, calib, grid, -args.sensor_height)
        save_topview_label(label, os.path.join(out, args.id + '_ipm.png'))
    print('Saved annotations of {} to {}'.format(args.id, out))
    return EXIT_OK


def cmd_synth(args, config):
    print_configuration(config, ['grid', 'synth'])
    write_synthetic_dataset(
        args.output, args.count, seed=config['synth'].seed,
        base=config['synth'], grid=config['grid']
    )
    return EXIT_OK


def cmd_train(args, config):
    print_configuration(config, ['grid', 'model', 'train'])
    root = data_root(args)
    if args.manifest is not None:
        manifest = args.manifest
    else:
        manifest = SplitManifest.from_directory(
            root, seed=config['train'].seed,
            validation_per_category=config['train'].validation_per_category
        )
    trainer = Trainer(
        data_root=root,
        manifest=manifest,
        grid=config['grid'],
        model_config=config['model'],
        train_config=config['train'],
        directory=args.output,
    )
    result = trainer.run()
    print('best epoch {}, validation MaxF {:.2f}%'.format(
        result.best_epoch, 100 * result.best_maxf
    ))
    return EXIT_OK


def cmd_infer(args, config):
    model, grid = load_model(args.checkpoint)
    print_configuration({'grid': grid, 'model': model.config}, ['grid', 'model'])
    cloud = load_velodyne_bin(args.input)
    result = infer(args.checkpoint, cloud, grid=grid, model=model)
    save_topview(
        TopViewTensor(result.confidence, ['road_confidence']), args.output
    )
    print('Saved {}'.format(args.output))
    print('inference time: {:.1f} ms'.format(result.elapsed_ms))
    if args.overlay is not None:
        count = rasterize_features(cloud, grid).data[0]
        view.save_overlay(result.confidence, args.overlay, background=count)
    return EXIT_OK


def _predictions(args, config):
    root = data_root(args)
    model, grid = load_model(args.checkpoint)
    ids = split_ids(args, root, config)
    dataset = RoadDataset(root, ids, grid, augmented=False)
    pairs = predict_dataset(model, dataset, config['train'].batch_size)
    return ids, pairs, grid


def cmd_eval(args, config):
    print_configuration(config, ['train', 'eval'])
    ids, pairs, grid = _predictions(args, config)
    result = sweep(pairs, config['eval'].max_thresholds)
    table = metrics_table([((args.split,), result)], ['split'])
    print(table.strip())
    print('AP {:.2f}%, unknown pixels per example: {}'.format(
        100 * result.ap, ', '.join(str(n) for n in result.n_unknown)
    ))
    out = args.output
    write_table(table, os.path.join(out, 'metrics.csv'))
    write_pr_curve(result, os.path.join(out, 'pr_curve.txt'))
    view.save_pr_figure(
        result, os.path.join(out, 'pr_curve.png'), labels=[args.split]
    )
    if args.overlays:
        for example_id, (confidence, truth) in zip(ids, pairs):
            view.save_overlay(
                confidence,
                os.path.join(out, 'overlays', example_id + '.png'),
                truth=truth
            )
    print('Saved results to {}'.format(out))
    return EXIT_OK


def cmd_roi_study(args, config):
    print_configuration(config, ['train', 'eval'])
    _, pairs, grid = _predictions(args, config)
    results = roi_study(
        pairs, config['eval'].bounds, grid, config['eval'].max_thresholds
    )
    table = roi_table(results)
    print(table.strip())
    write_table(table, os.path.join(args.output, 'roi_study.csv'))
    return EXIT_OK


def cmd_compare_mappings(args, config):
    print_configuration(config, ['train', 'eval'])
    root = data_root(args)
    model, grid = load_model(args.checkpoint)
    ids = split_ids(args, root, config)
    predictions, pcp, ipm = {}, {}, {}
    for example_id in ids:
        paths = example_paths(root, example_id)
        require_files(
            [paths['velodyne'], paths['calib'], paths['gt_image']], example_id
        )
        annotation = load_perspective_annotation(paths['gt_image'])
        height, width = annotation.shape
        calib = load_kitti_calibration(paths['calib'], width, height)
        cloud = load_velodyne_bin(paths['velodyne'])
        pcp[example_id], _ = annotate_pcp(cloud, calib, annotation, grid)
        ipm[example_id] = ipm_topview(
            annotation, calib, grid, -args.sensor_height
        )
        predictions[example_id] = infer(
            args.checkpoint, cloud, grid=grid, model=model
        ).confidence
    comparison = compare_mappings(
        predictions, pcp, ipm, config['eval'].max_thresholds
    )
    table = comparison_table([(args.split, comparison)])
    print(table.strip())
    print('cells where the mappings disagree: {}'.format(
        comparison.total_disagreement
    ))
    write_table(table, os.path.join(args.output, 'comparison.csv'))
    return EXIT_OK


def cmd_rf_table(args, config):
    print_configuration(config, ['model'])
    print(architecture_table(config['model']))
    return EXIT_OK


##############################################################################
#                                                                            #
#                                   Parser                                   #
#                                                                            #
##############################################################################

def _add_common(parser):
    parser.add_argument('--config', help='key = value configuration file')
    parser.add_argument(
        '--set', dest='overrides', action='append', default=[],
        metavar='SECTION.KEY=VALUE', help='override a configuration value'
    )
    parser.add_argument('--seed', type=int, help='seed of every random draw')
    parser.add_argument(
        '--threads', type=int,
        help='worker threads (1 keeps results bit reproducible)'
    )


def _add_data_root(parser):
    parser.add_argument(
        '--data-root',
        help='data root, ${} by default'.format(DATA_ROOT_VARIABLE)
    )


def _add_selection(parser):
    parser.add_argument('--checkpoint', required=True)
    _add_data_root(parser)
    parser.add_argument(
        '--split', choices=['validation', 'train', 'all'], default='validation'
    )
    parser.add_argument('--manifest', help='split manifest json')
    parser.add_argument('--ids', help='comma separated example ids')
    parser.add_argument('--output', default='results')


def build_parser():
    parser = LidarRoadsParser(
        prog='lidar-roads',
        description='Road detection in LIDAR top views'
    )
    parser.add_argument(
        '--version', action='version', version='%(prog)s ' + __version__
    )
    commands = parser.add_subparsers(dest='command', metavar='command')

    p = commands.add_parser('rasterize', help='point cloud to top view')
    _add_common(p)
    p.add_argument('input', help='velodyne .bin file')
    p.add_argument('output', help='TVT1 tensor file')
    p.add_argument('--png-dir', help='also write each channel as png')
    p.set_defaults(func=cmd_rasterize)

    p = commands.add_parser('annotate', help='top-view labels of an example')
    _add_common(p)
    _add_data_root(p)
    p.add_argument('id', help='example id, e.g. um_000000')
    p.add_argument(
        '--mapping', choices=['pcp', 'ipm', 'both'], default='pcp'
    )
    p.add_argument(
        '--sensor-height', type=float, default=1.73,
        help='height of the LIDAR above the road for IPM (m)'
    )
    p.add_argument('--output', default='annotated')
    p.set_defaults(func=cmd_annotate)

    p = commands.add_parser('synth', help='write a synthetic data root')
    _add_common(p)
    p.add_argument('output', help='data root to write')
    p.add_argument('--count', type=int, default=12)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('train', help='train the network')
    _add_common(p)
    _add_data_root(p)
    p.add_argument('--manifest', help='split manifest json')
    p.add_argument('--output', default='training')
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('infer', help='road confidence of a cloud')
    _add_common(p)
    p.add_argument('checkpoint')
    p.add_argument('input', help='velodyne .bin file')
    p.add_argument('output', help='TVT1 confidence file')
    p.add_argument('--overlay', help='png of the confidence over the counts')
    p.set_defaults(func=cmd_infer)

    p = commands.add_parser('eval', help='benchmark metrics')
    _add_common(p)
    _add_selection(p)
    p.add_argument(
        '--overlays', action='store_true', help='write overlay pngs'
    )
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser('roi-study', help='metrics per ROI bound')
    _add_common(p)
    _add_selection(p)
    p.set_defaults(func=cmd_roi_study)

    p = commands.add_parser(
        'compare-mappings', help='metrics against PCP and IPM labels'
    )
    _add_common(p)
    _add_selection(p)
    p.add_argument('--sensor-height', type=float, default=1.73)
    p.set_defaults(func=cmd_compare_mappings)

    p = commands.add_parser('rf-table', help='architecture table')
    _add_common(p)
    p.set_defaults(func=cmd_rf_table)
    return parser


def run(argv=None):
    """
    Run the command line and return the exit status: 0 on success, 1 on a
    usage or configuration error, 2 on a data error
    """
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    if not argv:
        parser.print_usage()
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if getattr(args, 'func', None) is None:
            parser.print_usage()
            return EXIT_USAGE
        config = resolve_configuration(
            args.config, args.overrides, args.seed, args.threads
        )
        return args.func(args, config)
    except (UsageError, ConfigurationError, properties.ValidationError) as err:
        print('error: {}'.format(err), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, TrainingError, OSError) as err:
        print('error: {}'.format(err), file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())
