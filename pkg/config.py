#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Run configuration: flat ``key = value`` files, ``--key value`` overrides and the builders that turn a run
configuration into the settings of each module

Examples
--------
Example usage::

    cfg = parse_config('fixtures/run.conf', ['--alpha', '0.01'])
    cfg['alpha']
    # 0.01
    print(echo_config(cfg))
"""
import logging
logger = logging.getLogger("config")
logger.debug("loading config module")

import yaml
from collections import OrderedDict

import synthdata
import model as mx
import pretrain
import prune as pr
import evalkit
import tools
from tools import ConfigError

# ~~~~ GLOBALS ~~~~~~ #
DEFAULTS = OrderedDict([
    # global
    ('seed', 0),
    ('out', 'mapex_out'),
    ('checkpoint', ''),
    ('data_dir', ''),
    # synthetic data
    ('modalities', synthdata.format_modalities(synthdata.default_modalities)),
    ('image_size', 32),
    ('classes', 4),
    ('n_train', 512),
    ('n_val', 128),
    ('n_test', 128),
    ('noise', 0.3),
    ('background', 1.0),
    # model
    ('dim', 64),
    ('depth', 4),
    ('heads', 4),
    ('num_experts', 8),
    ('expert_hidden', 128),
    ('top_k', 2),
    ('routing', 'modality'),
    ('shared_expert', False),
    ('decoder_depth', 2),
    ('decoder_dim', 48),
    ('decoder_heads', 4),
    ('decoder_hidden', 96),
    ('patch_size', 8),
    ('mask_ratio', 0.75),
    # pretraining
    ('steps', 2000),
    ('batch_size', 32),
    ('lr', 1e-3),
    ('beta1', 0.9),
    ('beta2', 0.95),
    ('weight_decay', 0.05),
    ('alpha', 0.01),
    ('dropout', 0.0),
    ('log_every', 100),
    ('eval_every', 200),
    # pruning
    ('prune_modalities', [0]),
    ('prune_k', 2),
    ('live_routing', False),
    # evaluation
    ('knn_k', 5),
    ('knn_modalities', []),
    ('ft_epochs', 30),
    ('ft_lr', 1e-3),
    ('ft_batch_size', 32),
    ('ft_frozen', False),
    ('k_shots', [10, 25]),
    ('sweep', 'routing'),
    ('seeds', [0]),
    ('k_values', []),
    # verify
    ('verify_probes', 50),
    ('verify_specs', 5),
    ('grad_tolerance', 1e-4),
])
"""
Every run configuration key with its default; the default's type is the key's type
"""

MODEL_KEYS = ('dim', 'depth', 'heads', 'num_experts', 'expert_hidden', 'top_k', 'routing', 'shared_expert',
    'decoder_depth', 'decoder_dim', 'decoder_heads', 'decoder_hidden', 'patch_size', 'image_size', 'mask_ratio')
PRETRAIN_KEYS = ('steps', 'batch_size', 'lr', 'beta1', 'beta2', 'weight_decay', 'alpha', 'dropout', 'log_every', 'eval_every')


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class RunConfig(OrderedDict):
    """
    Ordered ``key -> value`` mapping holding every key of ``DEFAULTS``
    """
    def echo(self):
        return(echo_config(self))


# ~~~~ PARSING ~~~~~~ #
def coerce_value(key, text):
    """
    Decode the text of a value and coerce it to the type of the key's default

    Raises
    ------
    ConfigError
        unknown key or a value that does not fit the type
    """
    if key not in DEFAULTS:
        raise ConfigError('unknown configuration key', key = key)
    default = DEFAULTS[key]
    text = str(text).strip()
    if isinstance(default, str):
        if len(text) >= 2 and text[0] == text[-1] and text[0] in '"\'':
            text = text[1:-1]
        return(text)
    if isinstance(default, list):
        try:
            if text.startswith('['):
                return(tools.parse_int_list(yaml.safe_load(text)))
            return(tools.parse_int_list(text))
        except (ValueError, TypeError, yaml.YAMLError):
            raise ConfigError('expected a comma separated list of integers, got "{0}"'.format(text), key = key)
    try:
        decoded = yaml.safe_load(text) if text else None
    except yaml.YAMLError:
        decoded = text
    if isinstance(default, bool):
        if isinstance(decoded, bool):
            return(decoded)
        raise ConfigError('expected true or false, got "{0}"'.format(text), key = key)
    if isinstance(default, int):
        if isinstance(decoded, int) and not isinstance(decoded, bool):
            return(decoded)
        raise ConfigError('expected an integer, got "{0}"'.format(text), key = key)
    if isinstance(default, float):
        if isinstance(decoded, (int, float)) and not isinstance(decoded, bool):
            return(float(decoded))
        try:
            return(float(text))
        except ValueError:
            raise ConfigError('expected a number, got "{0}"'.format(text), key = key)
    raise ConfigError('unsupported value type', key = key)

def read_config_file(path):
    """
    Read the ``key = value`` lines of a config file; ``#`` starts a comment, blank lines are skipped

    Returns
    -------
    OrderedDict
        raw text values in file order
    """
    if not tools.item_exists(path, item_type = 'file'):
        raise ConfigError('config file not found: {0}'.format(path), key = 'config')
    values = OrderedDict()
    with open(path) as f:
        for number, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError('line {0}: expected "key = value"'.format(number), key = line)
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()
    return(values)

def parse_overrides(overrides):
    """
    Turn ``['--key', 'value', ...]`` (or a dict) into an ordered ``key -> text`` mapping; dashes in keys become underscores
    """
    if overrides is None:
        return(OrderedDict())
    if isinstance(overrides, dict):
        return(OrderedDict((k.replace('-', '_'), v) for k, v in overrides.items()))
    values = OrderedDict()
    tokens = list(overrides)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith('--'):
            raise ConfigError('expected --key, got "{0}"'.format(token), key = token)
        key = token[2:].replace('-', '_')
        if '=' in key:
            key, value = key.split('=', 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError('missing value', key = key)
            value = tokens[i + 1]
            i += 2
        values[key] = value
    return(values)

def parse_config(path = None, overrides = None):
    """
    Build a ``RunConfig`` from defaults, an optional config file and command line overrides (highest precedence)

    Parameters
    ----------
    path: str
        flat ``key = value`` file; ``None`` uses the defaults only
    overrides: list or dict
        ``['--key', 'value', ...]`` tokens or a ``key -> value`` mapping
    """
    cfg = RunConfig(DEFAULTS)
    sources = []
    if path:
        sources.append(read_config_file(path))
    sources.append(parse_overrides(overrides))
    for source in sources:
        for key, text in source.items():
            if isinstance(text, (list, tuple)):
                text = ','.join(str(v) for v in text)
            elif isinstance(text, bool):
                text = 'true' if text else 'false'
            cfg[key] = coerce_value(key, text)
    return(cfg)

def format_value(value):
    if isinstance(value, bool):
        return('true' if value else 'false')
    if isinstance(value, float):
        return(repr(value))
    if isinstance(value, list):
        return(','.join(str(v) for v in value))
    return(str(value))

def echo_config(cfg):
    """
    Canonical text form: sorted ``key = value`` lines
    """
    lines = ['{0} = {1}'.format(key, format_value(cfg[key])) for key in sorted(cfg)]
    return('\n'.join(lines) + '\n')

def write_echo(cfg, output_dir):
    tools.mkdirs(output_dir)
    path = '{0}/config.echo.txt'.format(output_dir)
    with open(path, 'w') as f:
        f.write(echo_config(cfg))
    return(path)


# ~~~~ BUILDERS ~~~~~~ #
def data_config(cfg):
    """
    ``synthdata.generate`` configuration
    """
    return({
        'modalities': synthdata.parse_modalities(cfg['modalities']),
        'image_size': cfg['image_size'],
        'patch_size': cfg['patch_size'],
        'classes': cfg['classes'],
        'n_train': cfg['n_train'],
        'n_val': cfg['n_val'],
        'n_test': cfg['n_test'],
        'noise': cfg['noise'],
        'background': cfg['background'],
        'seed': cfg['seed'],
    })

def model_settings(cfg):
    """
    ``ModelConfig`` keywords (everything but the modality list)
    """
    settings = OrderedDict((key, cfg[key]) for key in MODEL_KEYS)
    settings['seed'] = cfg['seed']
    return(settings)

def model_config(cfg, dataset):
    modalities = [(spec.name, spec.channel_count) for spec in dataset.modalities]
    return(mx.ModelConfig(modalities = modalities, **model_settings(cfg)))

def pretrain_config(cfg):
    settings = OrderedDict((key, cfg[key]) for key in PRETRAIN_KEYS)
    settings['seed'] = cfg['seed']
    return(settings)

def prune_spec(cfg):
    return(pr.PruneSpec(modality_ids = cfg['prune_modalities'], k = cfg['prune_k']))

def finetune_config(cfg):
    return({
        'epochs': cfg['ft_epochs'],
        'lr': cfg['ft_lr'],
        'batch_size': cfg['ft_batch_size'],
        'frozen': cfg['ft_frozen'],
        'weight_decay': cfg['weight_decay'],
        'seed': cfg['seed'],
    })

def sweep_settings(cfg):
    return({
        'model': model_settings(cfg),
        'pretrain': pretrain_config(cfg),
        'seeds': list(cfg['seeds']),
        'knn_k': cfg['knn_k'],
        'k_values': list(cfg['k_values']),
    })

def check_sweep_kind(cfg):
    kinds = evalkit.SWEEP_KINDS + ('specialization',)
    if cfg['sweep'] not in kinds:
        raise ConfigError('expected one of {0}'.format(', '.join(kinds)), key = 'sweep')
    return(cfg['sweep'])
