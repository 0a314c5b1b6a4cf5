import logging
import os
import sys

LEVELS = {'debug': logging.DEBUG,
          'info': logging.INFO,
          'warning': logging.WARNING,
          'error': logging.ERROR}
ENV_VAR = 'MVT_LOG'
FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'


def level_from_env(default='warning'):
    """Returns the logging level named by MVT_LOG (default: warning)."""
    name = os.environ.get(ENV_VAR, default).strip().lower()
    return LEVELS.get(name, LEVELS[default])


def setup_logging(verbosity=0, stream=None):
    """Configures the ``forkcast`` logger once.

    Args:
      verbosity: number of -v flags; each one lowers the threshold one level
          below what MVT_LOG asks for.
      stream: where records go (default: sys.stderr).
    """
    level = level_from_env()
    level = max(logging.DEBUG, level - 10 * verbosity)
    root = logging.getLogger('forkcast')
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(FORMAT))
        root.addHandler(handler)
    return root


def kv(**fields):
    """Formats fields as a ``key=value`` line, in argument order."""
    parts = []
    for key in fields:
        value = fields[key]
        if isinstance(value, float):
            value = '%.6g' % value
        parts.append('%s=%s' % (key, value))
    return ' '.join(parts)


def progress_enabled():
    return (sys.stderr.isatty() and
            logging.getLogger('forkcast').getEffectiveLevel() <= logging.INFO)
