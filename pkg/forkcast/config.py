"""Run configuration: defaults, JSON config files and dotted-key overrides.

Every section is a dataclass. ``from_dict`` rejects unknown keys so that a
misspelt override fails loudly instead of being ignored.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

from forkcast.errors import ConfigError

logger = logging.getLogger(__name__)

VIEW_TAGS = ('deg45_a', 'deg45_b', 'deg45_c', 'topdown')
OPTIMIZERS = ('adadelta', 'adam', 'sgd')
DIVERSITY = ('hamming', 'sibling')


class _Section(object):
    """Mixin giving dataclass sections strict dict conversion."""

    @classmethod
    def from_dict(cls, data, prefix=None):
        prefix = prefix or cls.__name__
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ConfigError('%s must be an object, got %r' % (prefix, data))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError('unknown %s keys: %s' %
                              (prefix, ', '.join(unknown)))
        section = cls(**data)
        section.validate()
        return section

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        section = dataclasses.replace(self, **changes)
        section.validate()
        return section

    def validate(self):
        pass


def _positive(section, *names):
    for name in names:
        value = getattr(section, name)
        if value is None or value <= 0:
            raise ConfigError('%s.%s must be positive, got %r' %
                              (type(section).__name__, name, value))


@dataclass
class GeneratorConfig(_Section):
    rows: int = 18
    cols: int = 36
    width: float = 36.0
    height: float = 18.0
    coarse_factor: int = 2
    h: int = 8
    j: int = 2
    destinations: int = 3
    sigma: float = 0.1
    speed: float = 1.0
    max_pred_len: int = 26
    fps: float = 2.5
    k_classes: int = 13
    obstacles: int = 2
    max_retries: int = 20
    jitter: float = 1.0
    view_tags: List[str] = field(default_factory=lambda: list(VIEW_TAGS))

    def validate(self):
        _positive(self, 'rows', 'cols', 'width', 'height', 'h', 'j',
                  'destinations', 'speed', 'max_pred_len', 'fps',
                  'k_classes', 'max_retries', 'coarse_factor')
        if self.j < 2:
            raise ConfigError('generator.j must be >= 2, got %r' % self.j)
        if self.destinations < self.j:
            raise ConfigError('generator.destinations (%d) must be >= '
                              'generator.j (%d)' % (self.destinations, self.j))
        if self.rows < 2 or self.cols < 2:
            raise ConfigError('generator grid must be at least 2x2')
        if self.rows % self.coarse_factor or self.cols % self.coarse_factor:
            raise ConfigError('generator grid %dx%d is not divisible by '
                              'coarse_factor %d' %
                              (self.rows, self.cols, self.coarse_factor))
        if self.sigma < 0 or self.obstacles < 0 or self.jitter < 0:
            raise ConfigError('generator sigma, obstacles and jitter must '
                              'be non-negative')
        if self.k_classes < 5:
            raise ConfigError('generator.k_classes must be >= 5 so the '
                              'building class exists')
        bad = [t for t in self.view_tags if t not in VIEW_TAGS]
        if bad or not self.view_tags:
            raise ConfigError('unknown view tags: %s' % bad)


@dataclass
class ModelConfig(_Section):
    scales: List[List[int]] = field(default_factory=lambda: [[18, 36],
                                                             [9, 18]])
    d_enc: int = 256
    d_dec: int = 256
    d_e: int = 32
    kernel: int = 3
    k_classes: int = 13
    h: int = 8
    max_pred_len: int = 26
    use_gat: bool = True
    use_fine_decoder: bool = True
    use_multi_scale: bool = True
    gat_form: str = 'additive'

    def validate(self):
        _positive(self, 'd_enc', 'd_dec', 'd_e', 'kernel', 'k_classes', 'h',
                  'max_pred_len')
        if self.kernel % 2 != 1:
            raise ConfigError('model.kernel must be odd, got %d' % self.kernel)
        if self.d_enc != self.d_dec:
            raise ConfigError('model.d_dec must equal model.d_enc because '
                              'decoders start from the encoder state')
        if not self.scales:
            raise ConfigError('model.scales needs at least one scale')
        rows, cols = self.scales[0]
        for r, c in self.scales[1:]:
            if r <= 0 or c <= 0 or rows % r or cols % c or rows // r != cols // c:
                raise ConfigError('scale %dx%d does not evenly pool the fine '
                                  'scale %dx%d' % (r, c, rows, cols))
        if self.gat_form not in ('additive', 'attention'):
            raise ConfigError('model.gat_form must be additive or attention')

    def active_scales(self):
        """Grid sizes the model decodes at; the fine scale is always first."""
        if self.use_multi_scale:
            return [tuple(s) for s in self.scales]
        return [tuple(self.scales[0])]


@dataclass
class TrainConfig(_Section):
    lambda1: float = 0.1
    lambda2: float = 0.001
    lr: float = 0.3
    optimizer: str = 'adadelta'
    rho: float = 0.95
    eps: float = 1e-6
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    patience: int = 0
    min_delta: float = 1e-4
    dtype: str = 'float32'

    def validate(self):
        _positive(self, 'lambda1', 'lr', 'epochs', 'batch_size', 'eps')
        if self.lambda2 < 0:
            raise ConfigError('train.lambda2 must be non-negative')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError('train.optimizer must be one of %s' %
                              (OPTIMIZERS,))
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError('train.dtype must be float32 or float64')


@dataclass
class InferenceConfig(_Section):
    k: int = 20
    gamma: float = 1.0
    diversity: str = 'hamming'
    model: str = 'neural'
    strict_bounds: bool = False
    emit_heatmaps: bool = False
    jobs: int = 1

    def validate(self):
        _positive(self, 'k', 'jobs')
        if self.gamma < 0:
            raise ConfigError('inference.gamma must be >= 0')
        if self.diversity not in DIVERSITY:
            raise ConfigError('inference.diversity must be one of %s' %
                              (DIVERSITY,))
        if self.model not in ('neural', 'linear'):
            raise ConfigError('inference.model must be neural or linear')


@dataclass
class EvalConfig(_Section):
    k: int = 20
    horizons: List[float] = field(default_factory=lambda: [1, 2, 3])
    horizon_unit: str = 'seconds'
    fps: float = 2.5
    aggregate: str = 'future'

    def validate(self):
        _positive(self, 'k', 'fps')
        if self.horizon_unit not in ('seconds', 'frames'):
            raise ConfigError('eval.horizon_unit must be seconds or frames')
        if self.aggregate not in ('future', 'timestep'):
            raise ConfigError('eval.aggregate must be future or timestep')
        from forkcast.metrics import horizon_frames
        try:
            horizon_frames(self.horizons, self.horizon_unit, self.fps)
        except (TypeError, ValueError) as exc:
            raise ConfigError('eval.horizons must be numbers: %s' % exc)


SECTIONS = {'generator': GeneratorConfig,
            'model': ModelConfig,
            'train': TrainConfig,
            'inference': InferenceConfig,
            'eval': EvalConfig}


@dataclass
class RunConfig(object):
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = sorted(set(data) - set(SECTIONS) - {'seed'})
        if unknown:
            raise ConfigError('unknown config sections: %s' %
                              ', '.join(unknown))
        kwargs = {'seed': int(data.get('seed', 0))}
        for name, section in SECTIONS.items():
            kwargs[name] = section.from_dict(data.get(name), prefix=name)
        return cls(**kwargs)

    def to_dict(self):
        out = {'seed': self.seed}
        for name in SECTIONS:
            out[name] = getattr(self, name).to_dict()
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_value(text):
    """Parses an override value as JSON, falling back to the raw string."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(data, overrides):
    """Applies ``section.key=value`` overrides to a config dict.

    Args:
      data: nested dict as read from a config file.
      overrides: iterable of ``'section.key=value'`` strings.
    Returns:
      A new nested dict.
    Raises:
      ConfigError: malformed override or unknown section/key.
    """
    data = json.loads(json.dumps(data or {}))
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError('override %r is not of the form key=value' % item)
        key, raw = item.split('=', 1)
        path = key.strip().split('.')
        if path == ['seed']:
            data['seed'] = parse_value(raw)
            continue
        if len(path) != 2 or path[0] not in SECTIONS:
            raise ConfigError('unknown config key %r' % key)
        section, name = path
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if name not in names:
            raise ConfigError('unknown config key %r' % key)
        data.setdefault(section, {})[name] = parse_value(raw)
    return data


def load_config(path=None, overrides=None):
    """Resolves defaults, then the JSON file at ``path``, then overrides."""
    data = {}
    if path:
        try:
            with open(path) as fd:
                data = json.load(fd)
        except (IOError, OSError) as exc:
            raise ConfigError('cannot read config %s: %s' % (path, exc))
        except ValueError as exc:
            raise ConfigError('config %s is not valid JSON: %s' % (path, exc))
    data = apply_overrides(data, overrides)
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc))


def torch_dtype(name: Optional[str]):
    import torch
    return {'float32': torch.float32, 'float64': torch.float64}[name or
                                                                'float32']
