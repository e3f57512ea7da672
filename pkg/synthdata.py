#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Deterministic generator of labeled synthetic multi-modal imagery

Every modality of a sample is a stack of channel planes on a shared H x W grid. A plane is the sum of

- a class prototype: a 2-D sinusoidal grating whose frequency and orientation depend on the class, scaled by the modality's informativeness weight for that class
- a fixed scene background shared by all samples of the modality
- i.i.d. Gaussian noise with standard deviation ``noise``

Sample ``i`` is drawn from a random stream seeded with ``(seed, i)`` so generation does not depend on order.
"""
import logging
logger = logging.getLogger("synthdata")
logger.debug("loading synthdata module")

import os
import copy
from collections import OrderedDict

import numpy as np
import yaml

import tools
from tools import ConfigError, DataError, DegenerateChannelError

# ~~~~ GLOBALS ~~~~~~ #
SPLITS = ('train', 'val', 'test')

default_modalities = (
    ('RGBish', 3, 0.12),
    ('REDEDGEish', 2, 0.09),
    ('SARish', 1, 0.07),
    ('ELEish', 1, 0.05),
)
"""
``(name, channel_count, informativeness)`` of the default modality stack, ordered by informativeness
"""

default_config = {
    'modalities': default_modalities,
    'image_size': 32,
    'patch_size': 8,
    'classes': 4,
    'n_train': 512,
    'n_val': 128,
    'n_test': 128,
    'noise': 0.3,
    'background': 1.0,
    'seed': 0,
}


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class ModalitySpec(object):
    """
    Description of one modality: its id, name, channel count and per-class informativeness weights
    """
    def __init__(self, modality_id, name, channel_count, informativeness):
        if channel_count < 1:
            raise ConfigError('channel count must be >= 1', key = name)
        self.modality_id = int(modality_id)
        self.name = str(name)
        self.channel_count = int(channel_count)
        self.informativeness = [float(w) for w in informativeness]

    @property
    def weight(self):
        """
        Mean informativeness over classes
        """
        return(float(np.mean(self.informativeness)))

    def to_text(self):
        return('{0}:{1}:{2}'.format(self.name, self.channel_count, repr(self.weight)))

    def __repr__(self):
        return('ModalitySpec({0}, {1}, C={2}, w={3})'.format(self.modality_id, self.name, self.channel_count, self.weight))

    def __eq__(self, other):
        return(isinstance(other, ModalitySpec) and (self.modality_id, self.name, self.channel_count, self.informativeness) == (other.modality_id, other.name, other.channel_count, other.informativeness))


class MultiModalSample(object):
    """
    One co-located sample: a ``[C_j, H, W]`` array per modality, the class label and the sample id
    """
    def __init__(self, planes, label, sample_id):
        self.planes = planes
        self.label = int(label)
        self.sample_id = int(sample_id)

    def stacked(self):
        """
        Return the channel-stacked ``[sum_j C_j, H, W]`` array
        """
        return(np.concatenate([self.planes[j] for j in sorted(self.planes)], axis = 0))


class DatasetStats(object):
    """
    Per-channel mean and standard deviation over the training split, one array per modality
    """
    def __init__(self, mean, std):
        self.mean = mean
        self.std = std


class Dataset(object):
    """
    Immutable container of the train / val / test splits

    Attributes
    ----------
    config: dict
        the generation config
    modalities: list
        ``ModalitySpec`` objects, ordered by ``modality_id``
    splits: dict
        ``split name -> {'x': {modality_id: array[N, C_j, H, W]}, 'y': array[N], 'ids': array[N]}``
    stats: DatasetStats
        normalization statistics, when the dataset was normalized
    """
    def __init__(self, config, modalities, splits, stats = None):
        self.config = config
        self.modalities = modalities
        self.splits = splits
        self.stats = stats
        for split in splits.values():
            for arr in list(split['x'].values()) + [split['y'], split['ids']]:
                arr.setflags(write = False)

    @property
    def num_classes(self):
        return(int(self.config['classes']))

    @property
    def image_size(self):
        return(int(self.config['image_size']))

    @property
    def modality_ids(self):
        return([spec.modality_id for spec in self.modalities])

    def modality(self, modality_id):
        for spec in self.modalities:
            if spec.modality_id == modality_id:
                return(spec)
        raise DataError('unknown modality id {0}'.format(modality_id))

    def size(self, split):
        return(int(self.splits[split]['y'].shape[0]))

    def labels(self, split):
        return(self.splits[split]['y'])

    def ids(self, split):
        return(self.splits[split]['ids'])

    def sample(self, split, index):
        data = self.splits[split]
        planes = {j: data['x'][j][index] for j in self.modality_ids}
        return(MultiModalSample(planes = planes, label = data['y'][index], sample_id = data['ids'][index]))

    def batch(self, split, indices = None, modality_ids = None):
        """
        Return ``({modality_id: array[B, C_j, H, W]}, labels[B])`` for the given sample indices
        """
        data = self.splits[split]
        if indices is None:
            indices = np.arange(self.size(split))
        if modality_ids is None:
            modality_ids = self.modality_ids
        indices = np.asarray(indices, dtype = np.int64)
        planes = OrderedDict((j, data['x'][j][indices]) for j in modality_ids)
        return(planes, data['y'][indices])

    def modality_view(self, split, modality_ids):
        """
        Return the planes of a modality subset for a whole split
        """
        planes, _ = self.batch(split, modality_ids = modality_ids)
        return(planes)

    def raw_features(self, split, modality_id):
        """
        Flatten one modality of every sample in a split to ``[N, C_j*H*W]``
        """
        x = self.splits[split]['x'][modality_id]
        return(x.reshape(x.shape[0], -1))


# ~~~~ CUSTOM FUNCTIONS ~~~~~~ #
def parse_modalities(text):
    """
    Parse a modality stack from ``name:channels:weight`` items separated by commas

    Examples
    --------
    Example usage::

        parse_modalities('RGBish:3:0.12,SARish:1:0.07')
        # (('RGBish', 3, 0.12), ('SARish', 1, 0.07))
    """
    items = []
    for item in str(text).split(','):
        parts = item.strip().split(':')
        if len(parts) != 3:
            raise ConfigError('expected name:channels:weight, got "{0}"'.format(item), key = 'modalities')
        try:
            items.append((parts[0], int(parts[1]), float(parts[2])))
        except ValueError:
            raise ConfigError('expected name:channels:weight, got "{0}"'.format(item), key = 'modalities')
    return(tuple(items))

def format_modalities(modalities):
    return(','.join('{0}:{1}:{2}'.format(name, c, repr(float(w))) for name, c, w in modalities))

def build_modality_specs(config):
    """
    Build ``ModalitySpec`` objects from a generation config
    """
    modalities = config['modalities']
    if isinstance(modalities, str):
        modalities = parse_modalities(modalities)
    specs = []
    for j, item in enumerate(modalities):
        name, channels, weight = item
        if isinstance(weight, (list, tuple)):
            informativeness = list(weight)
        else:
            informativeness = [weight] * int(config['classes'])
        specs.append(ModalitySpec(modality_id = j, name = name, channel_count = channels, informativeness = informativeness))
    return(specs)

def validate_config(config):
    """
    Check a generation config, raising ``ConfigError`` on the first problem
    """
    specs = build_modality_specs(config)
    if len(specs) < 2:
        raise ConfigError('at least two modalities are required', key = 'modalities')
    if int(config['classes']) < 2:
        raise ConfigError('at least two classes are required', key = 'classes')
    size = int(config['image_size'])
    if size < 1 or size % int(config['patch_size']) != 0:
        raise ConfigError('image size {0} is not divisible by patch size {1}'.format(size, config['patch_size']), key = 'image_size')
    for split in SPLITS:
        n = int(config['n_' + split])
        if n < 0 or n % int(config['classes']) != 0:
            raise ConfigError('split size must be a non-negative multiple of the class count', key = 'n_' + split)
    if float(config['noise']) < 0:
        raise ConfigError('noise must be non-negative', key = 'noise')
    return(specs)

def class_grating(label, spec, image_size, num_classes):
    """
    Noise-free class prototype of one modality, ``[C_j, H, W]``; frequency and orientation depend on the class, each channel has its own phase
    """
    coords = np.arange(image_size, dtype = np.float64) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing = 'ij')
    frequency = 2.0 + label
    orientation = np.pi * label / num_classes + np.pi * spec.modality_id / (4.0 * num_classes)
    u = xx * np.cos(orientation) + yy * np.sin(orientation)
    planes = []
    for c in range(spec.channel_count):
        phase = np.pi * c / 3.0 + 0.5 * spec.modality_id
        planes.append(np.sin(2.0 * np.pi * frequency * u + phase))
    weight = spec.informativeness[label]
    return(weight * np.stack(planes, axis = 0))

def scene_background(spec, image_size, amplitude):
    """
    Fixed class-independent background of one modality, ``[C_j, H, W]``
    """
    coords = np.arange(image_size, dtype = np.float64) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing = 'ij')
    planes = []
    for c in range(spec.channel_count):
        shift = 0.7 * spec.modality_id + 0.3 * c
        plane = np.cos(2.0 * np.pi * (xx + shift)) + 0.5 * np.sin(2.0 * np.pi * (yy - 0.5 * shift))
        planes.append(amplitude * plane + 0.25 * c)
    return(np.stack(planes, axis = 0))

def generate(config = None):
    """
    Generate a labeled synthetic multi-modal dataset

    Parameters
    ----------
    config: dict
        keys of ``default_config``; missing keys take their default

    Returns
    -------
    Dataset
        a pure function of ``config`` (including its seed)

    Examples
    --------
    Example usage::

        ds = generate({'seed': 3, 'noise': 0.0})
        ds.size('train')
        # 512
    """
    full = dict(default_config)
    if config:
        full.update(config)
    specs = validate_config(full)
    size = int(full['image_size'])
    num_classes = int(full['classes'])
    noise = float(full['noise'])
    prototypes = {(j.modality_id, c): class_grating(c, j, size, num_classes) for j in specs for c in range(num_classes)}
    backgrounds = {j.modality_id: scene_background(j, size, float(full['background'])) for j in specs}

    splits = OrderedDict()
    next_id = 0
    for split in SPLITS:
        n = int(full['n_' + split])
        ids = np.arange(next_id, next_id + n, dtype = np.int64)
        labels = np.arange(n, dtype = np.int64) % num_classes
        x = {j.modality_id: np.empty((n, j.channel_count, size, size), dtype = np.float64) for j in specs}
        for row, (sample_id, label) in enumerate(zip(ids, labels)):
            rng = np.random.default_rng([int(full['seed']), int(sample_id)])
            for spec in specs:
                j = spec.modality_id
                plane = prototypes[(j, label)] + backgrounds[j]
                x[j][row] = plane + noise * rng.standard_normal(plane.shape)
        splits[split] = {'x': x, 'y': labels, 'ids': ids}
        next_id += n
    logger.debug('generated dataset: {0} modalities, {1} classes, splits {2}'.format(len(specs), num_classes, [int(full['n_' + s]) for s in SPLITS]))
    return(Dataset(config = full, modalities = specs, splits = splits))

def compute_stats(dataset):
    """
    Per-channel mean and standard deviation over the training split

    Raises
    ------
    DegenerateChannelError
        a channel is constant over the training split
    """
    train = dataset.splits['train']['x']
    mean = {}
    std = {}
    for j, x in train.items():
        mean[j] = x.mean(axis = (0, 2, 3))
        std[j] = x.std(axis = (0, 2, 3))
        if np.any(std[j] <= 0):
            raise DegenerateChannelError('modality {0} has a constant channel in the training split'.format(j))
    return(DatasetStats(mean = mean, std = std))

def normalize_planes(planes, stats):
    """
    Normalize ``{modality_id: array[..., C_j, H, W]}`` channel-wise with ``stats``
    """
    out = OrderedDict()
    for j, x in planes.items():
        out[j] = (x - stats.mean[j][:, None, None]) / stats.std[j][:, None, None]
    return(out)

def normalize(sample, stats):
    """
    Return a channel-wise normalized copy of a ``MultiModalSample``
    """
    for j in sample.planes:
        if np.any(stats.std[j] <= 0):
            raise DegenerateChannelError('modality {0} has zero standard deviation'.format(j))
    planes = normalize_planes(sample.planes, stats)
    return(MultiModalSample(planes = dict(planes), label = sample.label, sample_id = sample.sample_id))

def normalize_dataset(dataset, stats = None):
    """
    Apply training-split statistics to every split; statistics are computed from ``dataset`` when not given
    """
    if stats is None:
        stats = compute_stats(dataset)
    splits = OrderedDict()
    for name, data in dataset.splits.items():
        x = normalize_planes(data['x'], stats)
        splits[name] = {'x': dict(x), 'y': data['y'].copy(), 'ids': data['ids'].copy()}
    return(Dataset(config = dataset.config, modalities = dataset.modalities, splits = splits, stats = stats))

def few_shot_subset(dataset, k_shot, seed):
    """
    Keep exactly ``k_shot`` randomly chosen training samples per class; val and test are untouched

    Raises
    ------
    DataError
        a class has fewer than ``k_shot`` training samples
    """
    k_shot = int(k_shot)
    train = dataset.splits['train']
    labels = train['y']
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < k_shot or k_shot < 1:
            raise DataError('class {0} has {1} training samples, {2} requested'.format(c, len(members), k_shot))
        keep.append(rng.choice(members, size = k_shot, replace = False))
    keep = np.sort(np.concatenate(keep))
    splits = OrderedDict()
    for name, data in dataset.splits.items():
        if name == 'train':
            splits[name] = {'x': {j: x[keep] for j, x in data['x'].items()}, 'y': data['y'][keep], 'ids': data['ids'][keep]}
        else:
            splits[name] = data
    config = dict(dataset.config)
    config['k_shot'] = k_shot
    return(Dataset(config = config, modalities = dataset.modalities, splits = splits, stats = dataset.stats))


# ~~~~ EXPORT / IMPORT ~~~~~~ #
def export_dataset(dataset, output_dir):
    """
    Write a dataset to a directory: ``manifest.txt`` (key=value text) plus one raw little-endian f32 file per split

    The normalization statistics of a normalized dataset go to the manifest as ``stats.mean.<j>`` and ``stats.std.<j>``.

    Notes
    -----
    Each split file holds the samples in split order; a sample is its modalities' planes in modality order,
    every plane row-major ``[C_j, H, W]``.
    """
    tools.mkdirs(output_dir)
    lines = []
    for key in sorted(dataset.config):
        value = dataset.config[key]
        if key == 'modalities':
            value = format_modalities([(s.name, s.channel_count, s.weight) for s in dataset.modalities])
        lines.append('config.{0}={1}'.format(key, value))
    for split in SPLITS:
        data = dataset.splits[split]
        lines.append('split.{0}.ids={1}'.format(split, ','.join(str(i) for i in data['ids'])))
        lines.append('split.{0}.labels={1}'.format(split, ','.join(str(i) for i in data['y'])))
        n = data['y'].shape[0]
        rows = [data['x'][j].reshape(n, dataset.modality(j).channel_count * dataset.image_size ** 2) for j in dataset.modality_ids]
        block = np.concatenate(rows, axis = 1) if rows else np.zeros((0, 0))
        block.astype('<f4').tofile(os.path.join(output_dir, '{0}.f32'.format(split)))
    if dataset.stats is not None:
        for j in dataset.modality_ids:
            lines.append('stats.mean.{0}={1}'.format(j, ','.join(repr(float(v)) for v in dataset.stats.mean[j])))
            lines.append('stats.std.{0}={1}'.format(j, ','.join(repr(float(v)) for v in dataset.stats.std[j])))
    with open(os.path.join(output_dir, 'manifest.txt'), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info('exported dataset to {0}'.format(output_dir))

def import_dataset(input_dir):
    """
    Read a dataset written by ``export_dataset``; plane values come back at f32 precision

    Config keys without a default are decoded as YAML scalars.
    """
    manifest = os.path.join(input_dir, 'manifest.txt')
    if not tools.item_exists(manifest, item_type = 'file'):
        raise DataError('missing manifest: {0}'.format(manifest))
    entries = {}
    with open(manifest) as f:
        for line in f:
            line = line.rstrip('\n')
            if line:
                key, value = line.split('=', 1)
                entries[key] = value
    config = dict(default_config)
    for key, value in entries.items():
        if key.startswith('config.'):
            name = key[len('config.'):]
            if name == 'modalities':
                config[name] = parse_modalities(value)
            elif name in default_config and isinstance(default_config[name], int):
                config[name] = int(value)
            elif name in default_config and isinstance(default_config[name], float):
                config[name] = float(value)
            elif name in default_config:
                config[name] = value
            else:
                config[name] = yaml.safe_load(value)
    specs = build_modality_specs(config)
    size = int(config['image_size'])
    splits = OrderedDict()
    for split in SPLITS:
        ids = tools.parse_int_list(entries['split.{0}.ids'.format(split)])
        labels = tools.parse_int_list(entries['split.{0}.labels'.format(split)])
        n = len(ids)
        width = sum(s.channel_count for s in specs) * size * size
        block = np.fromfile(os.path.join(input_dir, '{0}.f32'.format(split)), dtype = '<f4')
        if block.size != n * width:
            raise DataError('split {0}: expected {1} values, found {2}'.format(split, n * width, block.size))
        block = block.astype(np.float64).reshape(n, width)
        x = {}
        offset = 0
        for spec in specs:
            span = spec.channel_count * size * size
            x[spec.modality_id] = block[:, offset:offset + span].reshape(n, spec.channel_count, size, size).copy()
            offset += span
        splits[split] = {'x': x, 'y': np.asarray(labels, dtype = np.int64), 'ids': np.asarray(ids, dtype = np.int64)}
    stats = None
    if any(key.startswith('stats.') for key in entries):
        mean = {s.modality_id: np.array([float(v) for v in entries['stats.mean.{0}'.format(s.modality_id)].split(',')]) for s in specs}
        std = {s.modality_id: np.array([float(v) for v in entries['stats.std.{0}'.format(s.modality_id)].split(',')]) for s in specs}
        stats = DatasetStats(mean = mean, std = std)
    return(Dataset(config = config, modalities = specs, splits = splits, stats = stats))
