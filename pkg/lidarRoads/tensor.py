"""
A small reverse mode differentiable tensor engine holding the operators of
the road detection network: dilated convolution, ELU, 2 x 2 max pooling and
unpooling, spatial dropout, channel softmax and the masked cross-entropy.

Each operation returns a new :class:`Tensor` that remembers its parents and
a closure propagating the output gradient to them. :func:`backward` walks
the recorded graph in reverse topological order and releases it.
"""
import threading
import contextlib
import numpy as np
import properties

from .base import BaseLidarRoads, ContractError
from .pointcloud import ROAD, UNKNOWN


# probabilities are clamped to this value before taking the log
PROBABILITY_FLOOR = 1e-12

_state = threading.local()


def grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """
    Within this context operations do not record a graph
    """
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor(object):
    """
    Dense float array (up to 4 dimensions: batch, channels, height, width)
    with an optional gradient buffer.

    :param numpy.ndarray data: values; float32 unless a float64 array is given
    :param bool requires_grad: allocate a gradient and record operations
    :param str name: name used in error messages and checkpoints
    """

    def __init__(self, data, requires_grad=False, name=None, _parents=(),
                 _backward=None):
        data = np.asarray(data)
        if data.dtype != np.float64:
            data = data.astype(np.float32)
        if data.ndim > 4:
            raise ContractError(
                'tensors have at most 4 dimensions, got shape {}'.format(
                    data.shape
                )
            )
        self.data = data
        self.name = name
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        # intermediate nodes get their buffer during backward
        self.grad = None
        if self.requires_grad and not self._parents:
            self.grad = np.zeros_like(data)
        self._backward = _backward
        self._released = False

    def __repr__(self):
        return '<Tensor{}: shape {}, {}>'.format(
            '' if self.name is None else ' ' + self.name,
            self.shape, self.data.dtype
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return len(self._parents) == 0

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data


def _result(data, parents, backward, dtype):
    """
    Create the output of an operation, recording the graph when gradients
    are needed
    """
    data = np.asarray(data).astype(dtype, copy=False)
    parents = [p for p in parents if isinstance(p, Tensor)]
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(
            data, requires_grad=True, _parents=parents, _backward=backward
        )
    return Tensor(data)


def _accumulate(tensor, grad):
    if tensor.requires_grad:
        tensor.grad += np.asarray(grad).astype(tensor.dtype, copy=False)


def backward(loss, grad=None):
    """
    Reverse mode differentiation from ``loss``. Gradients are accumulated
    into the ``grad`` buffers of the leaves that require them; the graph is
    released afterwards.

    :param Tensor loss: output node (usually a scalar)
    :param numpy.ndarray grad: output gradient, ones by default
    """
    if loss._released:
        raise ContractError(
            'backward was already called on this graph; run a new forward '
            'pass first'
        )
    if not loss.requires_grad:
        raise ContractError('the loss does not depend on any parameter')

    # topological order, iterative to stay clear of the recursion limit
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.data)

    if grad is None:
        grad = np.ones_like(loss.data)
    loss.grad = loss.grad + np.asarray(grad, dtype=loss.dtype)

    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)

    for node in topo:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.grad = None
    loss._released = True


##############################################################################
#                                                                            #
#                                  Operators                                 #
#                                                                            #
##############################################################################

def tensor_sum(x, weights=None):
    """
    Sum of all entries of ``x``, optionally weighted by a constant array
    """
    w = np.ones(x.shape) if weights is None else np.asarray(weights, float)
    if w.shape != x.shape:
        raise ContractError(
            'weights of shape {} for a tensor of shape {}'.format(
                w.shape, x.shape
            )
        )
    value = np.sum(x.data.astype(np.float64) * w)

    def _backward(g):
        _accumulate(x, g * w)

    return _result(value, [x], _backward, x.dtype)


class ConvSpec(BaseLidarRoads):
    """
    Two dimensional convolution with odd kernels and per axis dilation.
    Inputs are zero padded by dilation * (kernel - 1) / 2 on each side so
    the output has the spatial size of the input.
    """

    in_channels = properties.Integer(
        "number of input feature maps", min=1, default=1
    )
    out_channels = properties.Integer(
        "number of output feature maps", min=1, default=1
    )
    kh = properties.Integer("kernel height", min=1, default=3)
    kw = properties.Integer("kernel width", min=1, default=3)
    dw = properties.Integer("dilation along the width", min=1, default=1)
    dh = properties.Integer("dilation along the height", min=1, default=1)

    @properties.validator
    def _check_odd_kernel(self):
        if self.kh % 2 == 0 or self.kw % 2 == 0:
            raise properties.ValidationError(
                'kernels must be odd, not {}x{}'.format(self.kh, self.kw)
            )

    @property
    def kernel(self):
        return (self.kh, self.kw)

    @property
    def dilation(self):
        """(width, height) dilation"""
        return (self.dw, self.dh)

    @property
    def padding(self):
        """(height, width) zero padding"""
        return (self.dh * (self.kh - 1) // 2, self.dw * (self.kw - 1) // 2)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kh, self.kw)


def conv2d(x, weights, bias, spec):
    """
    Cross-correlation of ``x`` (N, C, H, W) with ``weights``
    (O, C, kh, kw) plus ``bias`` (O,), dilated and zero padded according to
    ``spec``. Sums are accumulated in double precision.

    :rtype: Tensor
    """
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ContractError(
            'conv2d input of shape {} does not match {} input channels'.format(
                x.shape, spec.in_channels
            )
        )
    if weights.shape != spec.weight_shape:
        raise ContractError(
            'conv2d weights of shape {} do not match the expected {}'.format(
                weights.shape, spec.weight_shape
            )
        )
    if bias.shape != (spec.out_channels,):
        raise ContractError(
            'conv2d bias of shape {} does not match the expected {}'.format(
                bias.shape, (spec.out_channels,)
            )
        )

    N, C, H, W = x.shape
    ph, pw = spec.padding
    xp = np.pad(
        x.data.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw))
    )
    w = weights.data.astype(np.float64)
    taps = [
        (i, j, slice(i * spec.dh, i * spec.dh + H),
         slice(j * spec.dw, j * spec.dw + W))
        for i in range(spec.kh) for j in range(spec.kw)
    ]

    # accumulate in (N, H, W, O) and move the channels forward at the end
    out = np.zeros((N, H, W, spec.out_channels))
    for i, j, rows, cols in taps:
        out += np.tensordot(xp[:, :, rows, cols], w[:, :, i, j], axes=([1], [1]))
    out += bias.data.astype(np.float64)
    out = out.transpose(0, 3, 1, 2)

    def _backward(g):
        gt = g.astype(np.float64).transpose(0, 2, 3, 1)
        if bias.requires_grad:
            _accumulate(bias, gt.sum(axis=(0, 1, 2)))
        if weights.requires_grad:
            gw = np.zeros(w.shape)
            for i, j, rows, cols in taps:
                gw[:, :, i, j] = np.tensordot(
                    gt, xp[:, :, rows, cols], axes=([0, 1, 2], [0, 2, 3])
                )
            _accumulate(weights, gw)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i, j, rows, cols in taps:
                gxp[:, :, rows, cols] += np.tensordot(
                    gt, w[:, :, i, j], axes=([3], [0])
                ).transpose(0, 3, 1, 2)
            _accumulate(x, gxp[:, :, ph:ph + H, pw:pw + W])

    return _result(out, [x, weights, bias], _backward, x.dtype)


def elu(x, alpha=1.):
    """
    Exponential linear unit: x for x > 0, alpha (exp(x) - 1) otherwise
    """
    data = x.data.astype(np.float64)
    positive = data > 0
    out = np.where(positive, data, alpha * np.expm1(np.minimum(data, 0.)))

    def _backward(g):
        _accumulate(x, g * np.where(positive, 1., out + alpha))

    return _result(out, [x], _backward, x.dtype)


class PoolIndices(object):
    """
    Flat (H * W) input index of the maximum of each 2 x 2 window

    :param numpy.ndarray indices: (N, C, H/2, W/2) integer indices
    :param tuple input_shape: (N, C, H, W) shape of the pooled input
    """

    def __init__(self, indices, input_shape):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.input_shape = tuple(input_shape)

    @property
    def shape(self):
        return self.indices.shape

    def check_windows(self):
        """True if every index lies inside its 2 x 2 window"""
        W = self.input_shape[3]
        rows, cols = np.divmod(self.indices, W)
        oh = np.arange(self.shape[2])[:, None]
        ow = np.arange(self.shape[3])[None, :]
        return bool(((rows // 2 == oh) & (cols // 2 == ow)).all())


def maxpool2(x):
    """
    2 x 2 max pooling with stride 2. Ties go to the smallest flat index.

    :rtype: tuple
    :return: pooled Tensor, PoolIndices
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractError(
            'maxpool2 needs an (N, C, H, W) input with even H and W, got '
            '{}'.format(x.shape)
        )
    N, C, H, W = x.shape
    windows = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(
        0, 1, 2, 4, 3, 5
    ).reshape(N, C, H // 2, W // 2, 4)
    position = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, position[..., None], axis=-1)[..., 0]

    oh = np.arange(H // 2)[:, None]
    ow = np.arange(W // 2)[None, :]
    flat = (2 * oh + position // 2) * W + (2 * ow + position % 2)
    indices = PoolIndices(flat, x.shape)

    def _backward(g):
        gx = np.zeros((N, C, H * W), dtype=np.float64)
        np.put_along_axis(
            gx, flat.reshape(N, C, -1), g.reshape(N, C, -1), axis=2
        )
        _accumulate(x, gx.reshape(x.shape))

    return _result(out, [x], _backward, x.dtype), indices


def maxunpool2(x, indices, out_shape=None):
    """
    Scatter the values of ``x`` to the positions recorded by a 2 x 2 max
    pooling; every other entry of the output is zero.

    :param Tensor x: (N, C, H/2, W/2) values
    :param PoolIndices indices: indices of the pooling
    :param tuple out_shape: (N, C, H, W) output shape
    """
    if out_shape is None:
        out_shape = indices.input_shape
    out_shape = tuple(out_shape)
    if x.shape != indices.shape:
        raise ContractError(
            'maxunpool2 input of shape {} does not match indices of shape '
            '{}'.format(x.shape, indices.shape)
        )
    if len(out_shape) != 4 or out_shape[:2] != x.shape[:2]:
        raise ContractError(
            'maxunpool2 output shape {} does not match input shape {}'.format(
                out_shape, x.shape
            )
        )
    N, C, H, W = out_shape
    flat = indices.indices.reshape(N, C, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= H * W):
        raise ContractError(
            'maxunpool2 index out of bounds for an output of shape {}'.format(
                out_shape
            )
        )

    out = np.zeros((N, C, H * W), dtype=x.dtype)
    np.put_along_axis(out, flat, x.data.reshape(N, C, -1), axis=2)

    def _backward(g):
        _accumulate(
            x, np.take_along_axis(g.reshape(N, C, -1), flat, axis=2).reshape(
                x.shape
            )
        )

    return _result(out.reshape(out_shape), [x], _backward, x.dtype)


def dropout_generator(seed, layer_id=0, step=0):
    """
    Counter based generator keyed by (seed, layer, step)
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, layer_id, step]))
    )


def spatial_dropout(x, p_drop, training, seed=0, layer_id=0, step=0):
    """
    Zero whole feature maps with probability ``p_drop`` and scale the
    survivors by 1 / (1 - p_drop). Identity at inference.
    """
    if not 0 <= p_drop < 1:
        raise ContractError(
            'p_drop must be in [0, 1), not {}'.format(p_drop)
        )
    if not training or p_drop == 0:
        return x
    N, C = x.shape[:2]
    keep = dropout_generator(seed, layer_id, step).random((N, C)) >= p_drop
    scale = (keep / (1. - p_drop)).reshape((N, C) + (1,) * (x.ndim - 2))
    out = x.data.astype(np.float64) * scale

    def _backward(g):
        _accumulate(x, g * scale)

    return _result(out, [x], _backward, x.dtype)


def softmax_channels(x):
    """
    Softmax over the channel axis of an (N, C, H, W) tensor
    """
    if x.ndim != 4 or x.shape[1] < 2:
        raise ContractError(
            'softmax_channels needs an (N, C, H, W) input with C >= 2, got '
            '{}'.format(x.shape)
        )
    data = x.data.astype(np.float64)
    e = np.exp(data - data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        g = g.astype(np.float64)
        _accumulate(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _result(s, [x], _backward, x.dtype)


def cross_entropy(probs, target, unknown='mask'):
    """
    Mean negative log probability of the correct class over the counted
    pixels. Channel 1 holds the road probability, channel 0 the not road
    probability.

    :param Tensor probs: (N, 2, H, W) class probabilities
    :param numpy.ndarray target: (N, H, W) labels (ROAD, NOT_ROAD, UNKNOWN)
    :param str unknown: 'mask' excludes UNKNOWN pixels from the sum and the
        normalizer, 'not_road' counts them as NOT_ROAD
    :rtype: Tensor
    :return: scalar loss; ``loss.clamped`` is the number of probabilities
        clamped to 1e-12
    """
    target = np.asarray(target)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ContractError(
            'cross_entropy needs (N, 2, H, W) probabilities, got {}'.format(
                probs.shape
            )
        )
    if target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ContractError(
            'target of shape {} does not match probabilities of shape '
            '{}'.format(target.shape, probs.shape)
        )
    if unknown not in ('mask', 'not_road'):
        raise ContractError(
            "unknown must be 'mask' or 'not_road', not {}".format(unknown)
        )

    counted = np.ones(target.shape, dtype=bool)
    if unknown == 'mask':
        counted = target != UNKNOWN
    classes = (target == ROAD).astype(np.int64)

    p = np.take_along_axis(
        probs.data.astype(np.float64), classes[:, None], axis=1
    )[:, 0]
    clamped = counted & (p < PROBABILITY_FLOOR)
    p = np.maximum(p, PROBABILITY_FLOOR)
    n_counted = int(counted.sum())
    normalizer = float(max(n_counted, 1))
    value = -np.log(p)[counted].sum() / normalizer

    def _backward(g):
        gp = np.where(counted & ~clamped, -1. / (p * normalizer), 0.)
        gx = np.zeros(probs.shape)
        np.put_along_axis(gx, classes[:, None], (g * gp)[:, None], axis=1)
        _accumulate(probs, gx)

    loss = _result(value, [probs], _backward, probs.dtype)
    loss.clamped = int(clamped.sum())
    loss.counted = n_counted
    return loss
