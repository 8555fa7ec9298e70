#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

import configparser
import dataclasses
import logging
import os
import platform
from dataclasses import dataclass

from .analysis import check_thresholds
from .errors import InputError
from .synthetic import SyntheticSpec
from .transformer import ModelConfig, TrainHyper

logger = logging.getLogger(__name__)

SECTION = 'cfr'


def _parse_bool(text):
    value = text.strip().lower()
    if value in ('1', 'yes', 'true', 'on'):
        return True
    if value in ('0', 'no', 'false', 'off'):
        return False
    raise ValueError("not a boolean: %r" % text)


def _parse_floats(text):
    return tuple(float(t) for t in str(text).replace(' ', '').split(',') if t)


@dataclass
class RunConfig:
    # paths
    dataset: str = 'data'
    model: str = 'model.cfrt'
    output: str = 'out'
    index: str = ''
    # model
    image_size: int = 32
    patch_size: int = 8
    num_blocks: int = 2
    num_heads: int = 2
    embed_dim: int = 16
    mlp_dim: int = 32
    num_classes: int = 2
    channels: int = 3
    model_seed: int = 0
    # synthetic data
    num_images: int = 64
    num_land_classes: int = 4
    planted_class_id: int = 1
    texture_amplitude: float = 0.25
    noise_sigma: float = 0.05
    faint_fraction: float = 0.25
    faint_strength: float = 0.5
    data_seed: int = 0
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split_seed: int = 0
    # training
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.05
    train_seed: int = 0
    # uncertainty
    ridge_lambda: float = 1e-3
    ece_bins: int = 15
    # explanation
    target_class: int = 1
    relevance: str = 'lrp'
    epsilon: float = 1e-6
    grad_target: str = 'logit'
    pgm: bool = False
    # analysis
    thresholds: tuple = (10.0, 30.0, 50.0, 100.0)
    weighting: str = 'pixel'
    partition_scope: str = 'dataset'
    population: str = 'predicted'
    rank: bool = False
    threads: int = 1
    verbose: int = 0

    def model_config(self):
        return ModelConfig(self.image_size, self.patch_size, self.num_blocks, self.num_heads,
                           self.embed_dim, self.mlp_dim, self.num_classes, self.model_seed, self.channels)

    def synthetic_spec(self):
        return SyntheticSpec(self.num_images, self.image_size, self.num_land_classes, self.planted_class_id,
                             self.texture_amplitude, self.noise_sigma, self.data_seed, self.channels,
                             self.faint_fraction, self.faint_strength)

    def train_hyper(self):
        return TrainHyper(self.epochs, self.batch_size, self.learning_rate, self.train_seed)

    @property
    def fractions(self):
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def update(self, values, source):
        "apply 'key -> text or value' pairs, converting to each field's type"
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for key, value in values.items():
            key = key.replace('-', '_')
            if key not in types:
                raise InputError("%s: unknown setting '%s'" % (source, key))
            kind = types[key]
            try:
                if isinstance(value, str):
                    if kind in (bool, 'bool'):
                        value = _parse_bool(value)
                    elif kind in (tuple, 'tuple'):
                        value = _parse_floats(value)
                    elif kind in (int, 'int'):
                        value = int(value)
                    elif kind in (float, 'float'):
                        value = float(value)
                elif kind in (tuple, 'tuple'):
                    value = tuple(float(v) for v in value)
            except ValueError as e:
                raise InputError("%s: bad value for '%s': %s" % (source, key, e))
            setattr(self, key, value)

    def validate(self):
        for name in ('dataset', 'model', 'output'):
            if not getattr(self, name):
                raise InputError("path '%s' must not be empty" % name)
        self.thresholds = tuple(check_thresholds(self.thresholds))
        self.model_config().validate()
        self.synthetic_spec().validate()
        if self.relevance not in ('lrp', 'attention'):
            raise InputError("relevance must be 'lrp' or 'attention'")
        if self.grad_target not in ('logit', 'probability'):
            raise InputError("grad_target must be 'logit' or 'probability'")
        if self.weighting not in ('pixel', 'image'):
            raise InputError("weighting must be 'pixel' or 'image'")
        if self.population not in ('predicted', 'all'):
            raise InputError("population must be 'predicted' or 'all'")
        if self.partition_scope not in ('dataset', 'class'):
            raise InputError("partition_scope must be 'dataset' or 'class'")
        if not 0 <= self.target_class < self.num_classes:
            raise InputError("target_class %d out of range" % self.target_class)
        if self.epsilon <= 0 or self.ridge_lambda < 0 or self.ece_bins < 1 or self.threads < 1:
            raise InputError("epsilon > 0, ridge_lambda >= 0, ece_bins >= 1 and threads >= 1 required")
        return self

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ','.join('%g' % v for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append("%s = %s" % (f.name, value))
        return '\n'.join(lines) + '\n'


def default_config_path():
    if platform.system() == 'Windows':
        return os.path.expandvars(r"%APPDATA%\cfrelevance\cfrelevance.conf")
    if os.environ.get('XDG_CONFIG_HOME', False):
        return os.path.expandvars("$XDG_CONFIG_HOME/cfrelevance.conf")
    return os.path.expandvars("$HOME/.config/cfrelevance.conf")


def load_config_file(path, config=None):
    """
    plain 'key = value' lines, '#' comments
    """
    config = config or RunConfig()
    if not os.path.exists(path):
        raise FileNotFoundError("Can't open %s" % path)
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#', ';'))
    with open(path, encoding='utf-8') as fd:
        parser.read_string('[%s]\n%s' % (SECTION, fd.read()), source=path)
    config.update(dict(parser[SECTION]), path)
    logger.info("loaded config %s", path)
    return config


def setup_environment(args):
    """
    defaults < config file < command line flags
    """
    config = RunConfig()
    path = getattr(args, 'config', None)
    if path:
        load_config_file(path, config)
    elif os.path.exists(default_config_path()):
        load_config_file(default_config_path(), config)

    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(config)
                 if getattr(args, f.name, None) is not None}
    config.update(overrides, 'command line')
    return config.validate()
