"""Exception hierarchy shared by every forkcast module.

Each error kind carries the process exit code the command line uses when
the error escapes a subcommand.
"""


class ForkcastError(Exception):
    """Base class for all forkcast errors."""
    exit_code = 1
    kind = 'runtime'

    def to_record(self):
        return {'error': self.kind, 'message': str(self),
                'exit_code': self.exit_code}


class ConfigError(ForkcastError):
    exit_code = 2
    kind = 'config'


class ArgumentError(ForkcastError, ValueError):
    exit_code = 2
    kind = 'argument'


class GridRangeError(ForkcastError, IndexError):
    kind = 'grid_range'


class ShapeError(ForkcastError, ValueError):
    exit_code = 2
    kind = 'shape'

    def __init__(self, what, expected, got):
        super(ShapeError, self).__init__(
            '%s: expected shape %s, got %s' % (what, tuple(expected),
                                               tuple(got)))
        self.expected = tuple(expected)
        self.got = tuple(got)


class NumericError(ForkcastError, ArithmeticError):
    exit_code = 3
    kind = 'numeric'


class GenerationError(ForkcastError):
    kind = 'generation'

    def __init__(self, message, seed):
        super(GenerationError, self).__init__('%s (seed=%s)' % (message, seed))
        self.seed = seed


class ScenarioParseError(ForkcastError):
    exit_code = 2
    kind = 'scenario_parse'

    def __init__(self, message, line=None, field=None):
        where = ''
        if line is not None:
            where = 'line %d: ' % line
        if field is not None:
            message = '%s (field %r)' % (message, field)
        super(ScenarioParseError, self).__init__(where + message)
        self.line = line
        self.field = field


class ScenarioVersionError(ScenarioParseError):
    kind = 'scenario_version'


class CheckpointError(ForkcastError):
    exit_code = 2
    kind = 'checkpoint'


class BadMagicError(CheckpointError):
    kind = 'checkpoint_magic'


class CheckpointVersionError(CheckpointError):
    kind = 'checkpoint_version'


class ChecksumError(CheckpointError):
    kind = 'checkpoint_crc'

    def __init__(self, stored, computed, offset, length):
        super(ChecksumError, self).__init__(
            'CRC32 mismatch: stored %08x at offset %d, computed %08x over '
            'bytes [0, %d)' % (stored, offset, computed, length))
        self.stored = stored
        self.computed = computed
        self.offset = offset
        self.length = length


class CheckpointFormatError(CheckpointError):
    kind = 'checkpoint_format'


class CheckpointShapeError(CheckpointError):
    kind = 'checkpoint_shape'


class TrainingError(ForkcastError):
    exit_code = 3
    kind = 'divergence'

    def __init__(self, epoch, last_finite_loss):
        super(TrainingError, self).__init__(
            'loss diverged at epoch %d (last finite loss %r)' %
            (epoch, last_finite_loss))
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class GradCheckError(ForkcastError):
    kind = 'grad_check'
