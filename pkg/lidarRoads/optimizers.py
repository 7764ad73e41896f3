import os
import numpy as np
from collections import OrderedDict

from .base import (
    ContractError, MalformedFileError, CheckpointVersionError, TrainingError
)


CHECKPOINT_MAGIC = b'LDNN'
CHECKPOINT_VERSION = 1

_UINT = np.dtype('<u4')
_FLOAT = np.dtype('<f4')

# names of the scalar optimizer records in a checkpoint
_SCALARS = ['adam.t', 'adam.lr', 'adam.beta1', 'adam.beta2', 'adam.eps']


class AdamState(object):
    """
    State of the Adam optimizer: first and second moment of every parameter,
    the number of steps taken and the hyperparameters.

    :param dict params: name -> Tensor of the optimized parameters
    :param float lr: learning rate
    """

    def __init__(self, params=None, lr=0.01, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = OrderedDict()
        self.v = OrderedDict()
        if params is not None:
            for name, p in params.items():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def __repr__(self):
        return '<AdamState: {} parameters, t={}, lr={}>'.format(
            len(self.m), self.t, self.lr
        )


def adam_step(params, state, grads=None):
    """
    One Adam update with bias correction. All gradients are checked before
    any parameter changes, so a non-finite gradient leaves the parameters
    and the state untouched.

    :param dict params: name -> Tensor
    :param AdamState state: optimizer state, updated in place
    :param dict grads: name -> gradient array, the ``grad`` of each
        parameter by default
    """
    if grads is None:
        grads = OrderedDict((name, p.grad) for name, p in params.items())

    for name, p in params.items():
        if name not in state.m:
            raise ContractError(
                'parameter {} is not tracked by the optimizer state'.format(
                    name
                )
            )
        g = grads[name]
        if g is None or np.shape(g) != p.shape:
            raise ContractError(
                'gradient of {} has shape {}, the parameter {}'.format(
                    name, None if g is None else np.shape(g), p.shape
                )
            )
        if not np.isfinite(g).all():
            raise TrainingError(
                'non-finite gradient for parameter {} at step {}'.format(
                    name, state.t + 1
                ),
                step=state.t + 1, name=name
            )

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1. - b1 ** state.t
    correction2 = 1. - b2 ** state.t

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1. - b1) * g
        v = b2 * state.v[name] + (1. - b2) * g**2
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        update = state.lr * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
        p.data = (p.data - update).astype(p.dtype)

    return params, state


##############################################################################
#                                                                            #
#                              Checkpoint files                              #
#                                                                            #
##############################################################################

def _write_record(f, name, values):
    values = np.asarray(values)
    encoded = name.encode('utf-8')
    f.write(np.array([len(encoded)], dtype=_UINT).tobytes())
    f.write(encoded)
    f.write(np.array([values.ndim] + list(values.shape), dtype=_UINT).tobytes())
    f.write(np.ascontiguousarray(values, dtype=_FLOAT).tobytes())


class _Reader(object):

    def __init__(self, raw, filename):
        self.raw = raw
        self.filename = filename
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.raw):
            raise MalformedFileError(
                '{}: truncated at byte {}'.format(self.filename, self.offset)
            )
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def uints(self, n):
        return [int(i) for i in np.frombuffer(self.take(4 * n), dtype=_UINT)]

    def record(self):
        length, = self.uints(1)
        name = self.take(length).decode('utf-8')
        rank, = self.uints(1)
        shape = tuple(self.uints(rank))
        size = int(np.prod(shape))
        values = np.frombuffer(self.take(4 * size), dtype=_FLOAT)
        return name, values.reshape(shape).astype(np.float32)


def save_checkpoint(filename, params, state=None):
    """
    Write parameters and optimizer state to an LDNN file: magic, format
    version, the number of parameter records and the records (name length,
    name, rank, dimensions, float32 payload), then the number of optimizer
    records and the records in the same layout. All numbers little endian.

    :param str filename: checkpoint file
    :param dict params: name -> Tensor or array
    :param AdamState state: optional optimizer state
    """
    directory = os.path.dirname(filename)
    if directory and not os.path.isdir(directory):
        os.makedirs(directory)

    records = [
        (name, getattr(p, 'data', p)) for name, p in params.items()
    ]
    optimizer_records = []
    if state is not None:
        for name in state.m:
            optimizer_records.append(('adam.m.' + name, state.m[name]))
            optimizer_records.append(('adam.v.' + name, state.v[name]))
        scalars = [state.t, state.lr, state.beta1, state.beta2, state.eps]
        optimizer_records += [
            (name, np.asarray(value)) for name, value in zip(_SCALARS, scalars)
        ]

    with open(filename, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([CHECKPOINT_VERSION, len(records)], _UINT).tobytes())
        for name, values in records:
            _write_record(f, name, values)
        f.write(np.array([len(optimizer_records)], _UINT).tobytes())
        for name, values in optimizer_records:
            _write_record(f, name, values)
    return filename


def load_checkpoint(filename):
    """
    Read an LDNN checkpoint

    :rtype: tuple
    :return: OrderedDict name -> float32 array, AdamState or None
    """
    with open(filename, 'rb') as f:
        reader = _Reader(f.read(), filename)

    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise MalformedFileError(
            '{}: not an LDNN checkpoint'.format(filename)
        )
    version, n_params = reader.uints(2)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            '{}: checkpoint format version {}, expected {}'.format(
                filename, version, CHECKPOINT_VERSION
            )
        )

    params = OrderedDict(reader.record() for _ in range(n_params))

    n_optimizer, = reader.uints(1)
    optimizer = OrderedDict(reader.record() for _ in range(n_optimizer))
    if reader.offset != len(reader.raw):
        raise MalformedFileError(
            '{}: {} trailing bytes'.format(
                filename, len(reader.raw) - reader.offset
            )
        )

    state = None
    if optimizer:
        missing = [s for s in _SCALARS if s not in optimizer]
        if missing:
            raise MalformedFileError(
                '{}: optimizer records {} missing'.format(filename, missing)
            )
        state = AdamState(
            lr=float(optimizer['adam.lr']),
            beta1=float(optimizer['adam.beta1']),
            beta2=float(optimizer['adam.beta2']),
            eps=float(optimizer['adam.eps']),
        )
        state.t = int(optimizer['adam.t'])
        for name in params:
            try:
                state.m[name] = optimizer['adam.m.' + name]
                state.v[name] = optimizer['adam.v.' + name]
            except KeyError:
                raise MalformedFileError(
                    '{}: no optimizer moments for {}'.format(filename, name)
                )
    return params, state
