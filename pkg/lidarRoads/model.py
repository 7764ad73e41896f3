import numpy as np
import properties
from collections import OrderedDict, namedtuple

from .base import (
    BaseLidarRoads, ContractError, ConfigurationError, CheckpointVersionError
)
from . import tensor
from .tensor import Tensor, ConvSpec


# Global variables (Filenames)
MODEL_PARAMETERS_FILENAME = "ModelParameters.json"

LAYER_KINDS = [
    'Conv', 'DilatedConv', 'MaxPool', 'MaxUnpool', 'Elu', 'SpatialDropout',
    'Softmax'
]
CONVOLUTIONS = ('Conv', 'DilatedConv')

# (width, height) dilations of the 3x3 layers of the context module
CONTEXT_DILATIONS = [(1, 1), (1, 2), (2, 4), (4, 8), (8, 16), (16, 32), (32, 64)]

N_CLASSES = 2

ReceptiveField = namedtuple('ReceptiveField', ['width_px', 'height_px'])


def format_receptive_field(rf):
    return '{}x{}'.format(rf.width_px, rf.height_px)


##############################################################################
#                                                                            #
#                                Architecture                                #
#                                                                            #
##############################################################################

class LayerSpec(BaseLidarRoads):
    """
    One layer of the network. Kernel and dilation only matter for
    convolutions, dilation only for dilated convolutions.
    """

    name = properties.String("name of the layer", default="")

    kind = properties.StringChoice(
        "type of layer", choices=LAYER_KINDS, default='Conv'
    )

    kh = properties.Integer("kernel height", min=1, default=1)
    kw = properties.Integer("kernel width", min=1, default=1)

    dw = properties.Integer("dilation along the width", min=1, default=1)
    dh = properties.Integer("dilation along the height", min=1, default=1)

    out_maps = properties.Integer(
        "number of output feature maps (convolutions only)", min=0, default=0
    )

    @properties.validator
    def _check_kind(self):
        if self.kind != 'DilatedConv' and (self.dw, self.dh) != (1, 1):
            raise properties.ValidationError(
                'layer {}: only a DilatedConv has a dilation, got {} with '
                'dilation ({}, {})'.format(self.name, self.kind, self.dw, self.dh)
            )
        if self.kind in CONVOLUTIONS:
            if self.out_maps < 1:
                raise properties.ValidationError(
                    'layer {}: a convolution needs out_maps >= 1'.format(
                        self.name
                    )
                )
            if self.kh % 2 == 0 or self.kw % 2 == 0:
                raise properties.ValidationError(
                    'layer {}: kernels must be odd, not {}x{}'.format(
                        self.name, self.kh, self.kw
                    )
                )
        elif self.out_maps != 0:
            raise properties.ValidationError(
                'layer {}: out_maps is only defined for convolutions, not for '
                'a {}'.format(self.name, self.kind)
            )

    @property
    def is_convolution(self):
        return self.kind in CONVOLUTIONS

    @property
    def kernel(self):
        return (self.kh, self.kw)

    @property
    def dilation(self):
        return (self.dw, self.dh)

    def conv_spec(self, in_channels):
        return ConvSpec(
            in_channels=in_channels, out_channels=self.out_maps,
            kh=self.kh, kw=self.kw, dw=self.dw, dh=self.dh
        )


def default_context_layers(context_maps=128, encoder_maps=32):
    """
    The context module: seven dilated 3x3 convolutions with
    ``context_maps`` feature maps and a 1x1 convolution back to
    ``encoder_maps`` feature maps
    """
    layers = [
        LayerSpec(
            name='context_{}'.format(i + 1), kind='DilatedConv', kh=3, kw=3,
            dw=dw, dh=dh, out_maps=context_maps
        )
        for i, (dw, dh) in enumerate(CONTEXT_DILATIONS)
    ]
    layers.append(LayerSpec(
        name='context_8', kind='Conv', kh=1, kw=1, out_maps=encoder_maps
    ))
    return layers


class ModelConfig(BaseLidarRoads):
    """
    Parameters of the road detection network: an encoder (two 3x3
    convolutions and a 2x2 max pooling), the dilated context module, a
    decoder (max unpooling and two 3x3 convolutions) and a softmax.
    """

    filename = properties.String(
        "Filename to which the properties are serialized and written to",
        default=MODEL_PARAMETERS_FILENAME
    )

    input_channels = properties.Integer(
        "number of input images (6 statistics, 1 for occupancy)",
        min=1, default=6
    )

    encoder_maps = properties.Integer(
        "feature maps of the encoder convolutions", min=1, default=32
    )

    context_maps = properties.Integer(
        "feature maps of the dilated context convolutions", min=1, default=128
    )

    decoder_maps = properties.Integer(
        "feature maps of the first decoder convolution", min=1, default=32
    )

    dropout = properties.Float(
        "spatial dropout probability after each dilated convolution",
        min=0., max=1., default=0.25
    )

    context_layers = properties.List(
        "context module layers, built from context_maps and encoder_maps "
        "when empty",
        prop=properties.Instance("context layer", LayerSpec),
        required=False
    )

    @property
    def context(self):
        """the layers of the context module"""
        if self.context_layers:
            return list(self.context_layers)
        return default_context_layers(self.context_maps, self.encoder_maps)

    @properties.validator
    def _check_context(self):
        if not 0 <= self.dropout < 1:
            raise properties.ValidationError(
                'dropout must be in [0, 1), not {}'.format(self.dropout)
            )

        layers = self.context
        if len(layers) != len(CONTEXT_DILATIONS) + 1:
            raise properties.ValidationError(
                'the context module has {} layers, expected {}'.format(
                    len(layers), len(CONTEXT_DILATIONS) + 1
                )
            )
        maps = layers[0].out_maps
        for i, (layer, dilation) in enumerate(
            zip(layers[:-1], CONTEXT_DILATIONS)
        ):
            layer.validate()
            problems = []
            if layer.kind != 'DilatedConv':
                problems.append('kind {}, expected DilatedConv'.format(
                    layer.kind
                ))
            if layer.kernel != (3, 3):
                problems.append('filter {}x{}, expected 3x3'.format(
                    layer.kh, layer.kw
                ))
            if layer.dilation != dilation:
                problems.append('dilation {}, expected {}'.format(
                    layer.dilation, dilation
                ))
            if layer.out_maps != maps:
                problems.append('{} feature maps, expected {}'.format(
                    layer.out_maps, maps
                ))
            if problems:
                raise properties.ValidationError(
                    'context layer {} ({}): {}'.format(
                        i + 1, layer.name, '; '.join(problems)
                    )
                )

        last = layers[-1]
        last.validate()
        if last.kind != 'Conv' or last.kernel != (1, 1):
            raise properties.ValidationError(
                'context layer {} ({}): expected a 1x1 Conv, got a {}x{} '
                '{}'.format(len(layers), last.name, last.kh, last.kw, last.kind)
            )
        if last.out_maps != self.encoder_maps:
            raise properties.ValidationError(
                'context layer {} ({}): {} feature maps, expected {} to match '
                'the pooling indices of the encoder'.format(
                    len(layers), last.name, last.out_maps, self.encoder_maps
                )
            )

    def layers(self):
        """
        The full layer stack of the network
        """
        layers = [
            LayerSpec(name='encoder_1', kind='Conv', kh=3, kw=3,
                      out_maps=self.encoder_maps),
            LayerSpec(name='encoder_1_elu', kind='Elu'),
            LayerSpec(name='encoder_2', kind='Conv', kh=3, kw=3,
                      out_maps=self.encoder_maps),
            LayerSpec(name='encoder_2_elu', kind='Elu'),
            LayerSpec(name='encoder_pool', kind='MaxPool'),
        ]
        for layer in self.context:
            layers.append(layer)
            if layer.kind == 'DilatedConv':
                layers.append(LayerSpec(name=layer.name + '_elu', kind='Elu'))
                layers.append(LayerSpec(
                    name=layer.name + '_dropout', kind='SpatialDropout'
                ))
        layers += [
            LayerSpec(name='decoder_unpool', kind='MaxUnpool'),
            LayerSpec(name='decoder_1', kind='Conv', kh=3, kw=3,
                      out_maps=self.decoder_maps),
            LayerSpec(name='decoder_1_elu', kind='Elu'),
            LayerSpec(name='decoder_2', kind='Conv', kh=3, kw=3,
                      out_maps=N_CLASSES),
            LayerSpec(name='softmax', kind='Softmax'),
        ]
        return layers

    def conv_specs(self):
        """
        OrderedDict layer name -> ConvSpec of every convolution
        """
        specs = OrderedDict()
        channels = self.input_channels
        for layer in self.layers():
            if layer.is_convolution:
                specs[layer.name] = layer.conv_spec(channels)
                channels = layer.out_maps
        return specs

    def parameter_count(self):
        """number of trainable weights and biases"""
        return int(sum(
            np.prod(spec.weight_shape) + spec.out_channels
            for spec in self.conv_specs().values()
        ))


def receptive_field(layers):
    """
    Receptive field after each layer of a stack, starting from 1x1. A k x k
    convolution with dilation (dw, dh) adds dw (kw - 1) by dh (kh - 1)
    input pixels at the current stride; pooling doubles the stride, unpooling
    halves it.

    :param list layers: LayerSpec list
    :rtype: list
    :return: ReceptiveField per layer
    """
    width, height = 1, 1
    stride = 1
    fields = []
    for layer in layers:
        if layer.is_convolution:
            width += stride * layer.dw * (layer.kw - 1)
            height += stride * layer.dh * (layer.kh - 1)
        elif layer.kind == 'MaxPool':
            width += stride
            height += stride
            stride *= 2
        elif layer.kind == 'MaxUnpool':
            stride = max(stride // 2, 1)
        fields.append(ReceptiveField(width, height))
    return fields


def architecture_table(config=None):
    """
    Text table of the context module: layer, filter size, dilation
    (width, height), receptive field, feature maps and non-linearity
    """
    if config is None:
        config = ModelConfig()
    layers = config.context
    header = [
        'layer', 'filter size', 'dilation', 'receptive field',
        'feature maps', 'non-linearity'
    ]
    rows = []
    for i, (layer, rf) in enumerate(zip(layers, receptive_field(layers))):
        rows.append([
            str(i + 1),
            '{}x{}'.format(layer.kh, layer.kw),
            '({}, {})'.format(layer.dw, layer.dh)
            if layer.kind == 'DilatedConv' else '-',
            format_receptive_field(rf),
            str(layer.out_maps),
            'ELU' if layer.kind == 'DilatedConv' else '-',
        ])
    widths = [
        max(len(r[i]) for r in [header] + rows) for i in range(len(header))
    ]
    lines = [
        '  '.join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
        for row in [header] + rows
    ]
    return '\n'.join(lines)


##############################################################################
#                                                                            #
#                                  Network                                   #
#                                                                            #
##############################################################################

class LoDNN(object):
    """
    The road detection network with its parameters

    :param ModelConfig config: architecture
    :param int seed: seed of the weight initialization
    :param dtype: float32 (default) or float64 parameters
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        if config is None:
            config = ModelConfig()
        try:
            config.validate()
        except properties.ValidationError as err:
            raise ConfigurationError(
                "invalid model configuration: {}".format(err)
            )
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.layers = config.layers()
        self.specs = config.conv_specs()
        self.parameters = self._initialize(seed)

    def __repr__(self):
        return '<LoDNN: {} layers, {} parameters>'.format(
            len(self.layers), self.config.parameter_count()
        )

    def _initialize(self, seed):
        """
        He uniform weights, bound sqrt(6 / fan_in), and zero biases
        """
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, spec in self.specs.items():
            fan_in = spec.in_channels * spec.kh * spec.kw
            bound = np.sqrt(6. / fan_in)
            weight = rng.uniform(-bound, bound, size=spec.weight_shape)
            params[name + '.weight'] = Tensor(
                weight.astype(self.dtype), requires_grad=True,
                name=name + '.weight'
            )
            params[name + '.bias'] = Tensor(
                np.zeros(spec.out_channels, dtype=self.dtype),
                requires_grad=True, name=name + '.bias'
            )
        return params

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def state_dict(self):
        """OrderedDict name -> parameter array"""
        return OrderedDict(
            (name, p.data) for name, p in self.parameters.items()
        )

    def load_parameters(self, arrays):
        """
        Replace the parameter values. Names and shapes must match the
        configuration exactly.
        """
        expected = list(self.parameters)
        if list(arrays) != expected:
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise CheckpointVersionError(
                'parameters do not match the model configuration (missing: '
                '{}, unexpected: {})'.format(missing, extra)
            )
        for name, values in arrays.items():
            p = self.parameters[name]
            if tuple(np.shape(values)) != p.shape:
                raise CheckpointVersionError(
                    'parameter {} has shape {}, the model expects {}'.format(
                        name, np.shape(values), p.shape
                    )
                )
            p.data = np.array(values, dtype=self.dtype)
            p.zero_grad()

    def forward(self, x, training=False, seed=0, step=0, features=None):
        """
        Class probabilities (N, 2, H, W) of a batch of top-view tensors
        (N, D, H, W); channel 1 is the road probability.

        :param x: numpy.ndarray or Tensor input batch
        :param bool training: apply spatial dropout
        :param int seed: dropout seed
        :param int step: training step (keys the dropout masks)
        :param dict features: if given, receives the input of the decoder
            under 'context' and the pooled encoder output under 'encoder'
        :rtype: Tensor
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ContractError(
                'input of shape {} does not match (N, {}, H, W)'.format(
                    x.shape, self.config.input_channels
                )
            )
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(
                'input height and width must be even, got {}x{}'.format(
                    x.shape[2], x.shape[3]
                )
            )

        pooled = []
        for layer_id, layer in enumerate(self.layers):
            if layer.is_convolution:
                x = tensor.conv2d(
                    x, self.parameters[layer.name + '.weight'],
                    self.parameters[layer.name + '.bias'],
                    self.specs[layer.name]
                )
            elif layer.kind == 'Elu':
                x = tensor.elu(x)
            elif layer.kind == 'MaxPool':
                shape = x.shape
                x, indices = tensor.maxpool2(x)
                pooled.append((indices, shape))
                if features is not None:
                    features['encoder'] = x
            elif layer.kind == 'MaxUnpool':
                if features is not None:
                    features['context'] = x
                indices, shape = pooled.pop()
                x = tensor.maxunpool2(x, indices, shape)
            elif layer.kind == 'SpatialDropout':
                x = tensor.spatial_dropout(
                    x, self.config.dropout, training, seed=seed,
                    layer_id=layer_id, step=step
                )
            elif layer.kind == 'Softmax':
                x = tensor.softmax_channels(x)
        return x

    def predict(self, x):
        """
        Road confidence (N, H, W) at inference, without recording a graph
        """
        with tensor.no_grad():
            probs = self.forward(x, training=False)
        return probs.data[:, 1]


def build_lodnn(config=None, rng_seed=0, dtype=np.float32):
    """
    Build and initialize the network described by ``config``
    """
    return LoDNN(config, seed=rng_seed, dtype=dtype)
