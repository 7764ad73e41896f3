import properties
import os
import json

from .info import __version__
from .utils import load_properties, report


##############################################################################
#                                                                            #
#                                 Exceptions                                 #
#                                                                            #
##############################################################################

class LidarRoadsError(Exception):
    """Base class for all errors raised by lidarRoads"""


class ContractError(LidarRoadsError, ValueError):
    """
    An operator was called with inputs that violate its preconditions
    (shape mismatch, odd spatial size, out of bounds indices, ...)
    """


class ConfigurationError(LidarRoadsError, ValueError):
    """
    A configuration value (config file key, split size, ROI bound, ...) is
    invalid
    """


class DataError(LidarRoadsError, IOError):
    """A data file is missing, malformed or corrupt"""


class MalformedFileError(DataError):
    """The layout of a file does not match its format"""


class CorruptRecordError(DataError):
    """A record of a file holds an invalid value"""

    def __init__(self, message, index=None):
        super(CorruptRecordError, self).__init__(message)
        self.index = index


class MissingExampleError(DataError):
    """A file belonging to an example of a data set is missing"""

    def __init__(self, message, example_id=None):
        super(MissingExampleError, self).__init__(message)
        self.example_id = example_id


class CheckpointVersionError(DataError):
    """
    A checkpoint was written by an incompatible format version or does not
    match the model configuration it is loaded into
    """


class TrainingError(LidarRoadsError, RuntimeError):
    """Training produced a non-finite loss or gradient"""

    def __init__(self, message, step=None, name=None):
        super(TrainingError, self).__init__(message)
        self.step = step
        self.name = name


##############################################################################
#                                                                            #
#                            Serializable Classes                            #
#                                                                            #
##############################################################################

class LoadableInstance(properties.Instance):

    class_info = "an instance of a class or the name of a file from which the "
    "instance can be created"

    def validate(self, instance, value):
        if isinstance(value, str):
            value = load_properties(value)
        return super(LoadableInstance, self).validate(instance, value)


class BaseLidarRoads(properties.HasProperties):

    filename = properties.String(
        "Filename to which the properties are serialized and written to",
    )

    directory = properties.String(
        "Working directory",
        default="."
    )

    version = properties.String(
        "version of the software",
        default=__version__
    )

    def save(self, filename=None, directory=None, verbose=True):
        """
        Save the properties to json

        :param str filename: filename for saving the properties
        :param str directory: directory in which the file is written
        """

        # make sure properties are all valid prior to saving
        self.validate()

        if filename is None:
            filename = self.filename

        if directory is None:
            directory = self.directory

        if not os.path.isdir(directory):
            os.makedirs(directory)

        f = os.path.join(directory, filename)
        with open(f, 'w') as outfile:
            json.dump(self.serialize(), outfile, indent=2, sort_keys=True)

        report('Saved {}'.format(f), verbose)
        return f

    def copy(self):
        """Make a copy of the current object"""
        return properties.copy(self)


##############################################################################
#                                                                            #
#                        Flat key = value configuration                      #
#                                                                            #
##############################################################################

def read_config(filename):
    """
    Read a flat configuration file. Each non-empty line holds one
    ``section.key = value`` pair, ``#`` starts a comment.

    :param str filename: configuration file
    :rtype: dict
    :return: ``{section: {key: value_string}}``
    """
    with open(filename, 'r') as f:
        lines = f.readlines()
    return parse_config_lines(lines, source=filename)


def parse_config_lines(lines, source='<overrides>'):
    """
    Parse ``section.key = value`` lines (see :func:`read_config`)
    """
    config = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(
                '{}:{}: expected "section.key = value", got "{}"'.format(
                    source, lineno, line
                )
            )
        key, value = [s.strip() for s in line.split('=', 1)]
        if '.' not in key:
            raise ConfigurationError(
                '{}:{}: key "{}" has no section prefix'.format(
                    source, lineno, key
                )
            )
        section, name = key.split('.', 1)
        config.setdefault(section, {})[name] = value
    return config


def _coerce(prop, value):
    if isinstance(prop, properties.Bool):
        lowered = value.lower()
        if lowered in ('true', '1', 'yes', 'on'):
            return True
        if lowered in ('false', '0', 'no', 'off'):
            return False
        raise ValueError('"{}" is not a boolean'.format(value))
    if isinstance(prop, properties.Integer):
        return int(value)
    if isinstance(prop, properties.Float):
        return float(value)
    return value


# properties that describe where an object is serialized, not what it is
_BOOKKEEPING = ('filename', 'directory', 'version')


def configurable_keys(instance):
    """
    Names of the properties of an instance that can be set from a flat
    configuration file
    """
    return sorted(
        name for name, prop in instance._props.items()
        if name not in _BOOKKEEPING and isinstance(
            prop, (properties.Bool, properties.Integer, properties.Float,
                   properties.String)
        )
    )


def apply_config(instance, values, section=''):
    """
    Set the properties of ``instance`` from a ``{key: value_string}`` dict.
    Unknown keys are rejected.

    :param BaseLidarRoads instance: the object to configure (modified in place)
    :param dict values: key value pairs of one configuration section
    :param str section: section name used in error messages
    """
    known = configurable_keys(instance)
    for key, value in sorted(values.items()):
        if key not in known:
            raise ConfigurationError(
                'unknown configuration key "{}.{}" (known keys: {})'.format(
                    section, key, ', '.join(known)
                )
            )
        prop = instance._props[key]
        try:
            setattr(instance, key, _coerce(prop, value))
        except (ValueError, properties.ValidationError) as err:
            raise ConfigurationError(
                'invalid value for "{}.{}": {}'.format(section, key, err)
            )
    return instance


def config_lines(instance, section):
    """
    Render the configurable properties of an instance as
    ``section.key = value`` lines
    """
    return [
        '{}.{} = {}'.format(section, key, getattr(instance, key))
        for key in configurable_keys(instance)
    ]
