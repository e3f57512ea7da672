#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Checkpoint container for full and pruned models (``.mpx``)

Layout
------
A checkpoint is a UTF-8 text manifest followed by a binary tensor section::

    MAPEX-CHECKPOINT\\n
    format_version = 1\\n
    <key> = <value>\\n            (model config, routing, prune spec, remap, step, digests)
    tensor.<i> = <name> <shape> <offset>\\n
    tensor_bytes = <n>\\n
    tensor_md5 = <hex digest of the tensor section>\\n
    END-MANIFEST\\n
    <tensor section: every parameter in manifest order, raw little-endian float64, row-major>

``<shape>`` is the dimensions joined by ``x`` (``-`` for a scalar) and ``<offset>`` the byte offset of the tensor
inside the tensor section. Frozen gate weights of pruned models are stored in the manifest as ``float.hex`` text.
"""
import logging
logger = logging.getLogger("checkpoint")
logger.debug("loading checkpoint module")

import os
from collections import OrderedDict

import numpy as np

import model as mx
import prune as pr
import tools
from tools import CheckpointError, MapexError

# ~~~~ GLOBALS ~~~~~~ #
MAGIC = 'MAPEX-CHECKPOINT'
END = 'END-MANIFEST'
FORMAT_VERSION = 1
EXTENSION = '.mpx'


# ~~~~ ENCODING HELPERS ~~~~~~ #
def _hex_list(values):
    return(','.join(float(v).hex() for v in values))

def _unhex_list(text):
    return(np.array([float.fromhex(v) for v in text.split(',') if v], dtype = np.float64))

def _shape_text(shape):
    return('x'.join(str(s) for s in shape) if shape else '-')

def _shape_value(text):
    return(tuple() if text == '-' else tuple(int(s) for s in text.split('x')))

def _coerce_model_value(key, text):
    default = mx.default_model_config.get(key)
    if isinstance(default, bool):
        return(text == 'True')
    if isinstance(default, int):
        return(int(text))
    if isinstance(default, float):
        return(float(text))
    return(text)

def rng_digest(model):
    """
    Digest standing in for the random state: runs are re-derived from the seed, so only seed and step are recorded
    """
    return(tools.md5_bytes('seed={0};step={1}'.format(model.config.seed, model.step).encode('utf-8')))


# ~~~~ MANIFEST ~~~~~~ #
def build_manifest(model, tensor_entries, tensor_bytes, tensor_md5):
    lines = [MAGIC, 'format_version = {0}'.format(FORMAT_VERSION)]
    pruned = isinstance(model, mx.PrunedModel)
    lines.append('kind = {0}'.format('pruned' if pruned else 'full'))
    for key, value in model.config.to_dict().items():
        lines.append('model.{0} = {1}'.format(key, value))
    lines.append('routing = {0}'.format(model.config.routing))
    lines.append('modalities = {0}'.format(','.join(str(j) for j in model.modality_ids)))
    if pruned:
        lines.append('prune.spec = {0}'.format(model.prune_spec.to_text()))
        lines.append('prune.live = {0}'.format('true' if not model.frozen else 'false'))
        for l, layer in enumerate(model.moe_layers()):
            lines.append('prune.layer.{0}.experts = {1}'.format(l, ','.join(str(i) for i in layer.expert_ids)))
            lines.append('prune.layer.{0}.remap = {1}'.format(l, ','.join('{0}:{1}'.format(old, new) for old, new in model.remap[l].items())))
            for j, (probs, selected, gates) in layer.frozen.items():
                lines.append('prune.layer.{0}.route.{1} = selected={2};gates={3};probs={4}'.format(
                    l, j, ','.join(str(i) for i in selected), _hex_list(gates), _hex_list(probs)))
    lines.append('step = {0}'.format(model.step))
    lines.append('rng_digest = {0}'.format(rng_digest(model)))
    lines.append('optimizer = {0}'.format(model.optimizer_digest))
    for i, (name, shape, offset) in enumerate(tensor_entries):
        lines.append('tensor.{0} = {1} {2} {3}'.format(i, name, _shape_text(shape), offset))
    lines.append('tensor_bytes = {0}'.format(tensor_bytes))
    lines.append('tensor_md5 = {0}'.format(tensor_md5))
    lines.append(END)
    return('\n'.join(lines) + '\n')

def parse_manifest(text):
    lines = text.split('\n')
    if not lines or lines[0] != MAGIC:
        raise CheckpointError('not a MAPEX checkpoint')
    values = OrderedDict()
    for line in lines[1:]:
        if line == END:
            break
        if not line:
            continue
        if ' = ' not in line:
            raise CheckpointError('malformed manifest line: "{0}"'.format(line))
        key, value = line.split(' = ', 1)
        values[key] = value
    return(values)


# ~~~~ SAVE / LOAD ~~~~~~ #
def save_checkpoint(model, path):
    """
    Write a full or pruned model to ``path``

    The file is written next to its destination and moved into place once complete.
    """
    entries = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype = '<f8').tobytes()
        entries.append((name, p.shape, offset))
        chunks.append(raw)
        offset += len(raw)
    section = b''.join(chunks)
    manifest = build_manifest(model, entries, len(section), tools.md5_bytes(section))
    parent = os.path.dirname(os.path.abspath(path))
    tools.mkdirs(parent)
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(manifest.encode('utf-8'))
        f.write(section)
    os.replace(tmp, path)
    logger.info('saved {0} tensors ({1} bytes) to {2}'.format(len(entries), len(section), path))
    return(path)

def read_checkpoint(path):
    """
    Read and validate a checkpoint file

    Returns
    -------
    tuple
        ``(manifest, {name: numpy.ndarray})`` with tensors in manifest order
    """
    if not tools.item_exists(path, item_type = 'file'):
        raise CheckpointError('checkpoint not found: {0}'.format(path))
    with open(path, 'rb') as f:
        blob = f.read()
    marker = ('\n' + END + '\n').encode('utf-8')
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError('truncated manifest')
    try:
        manifest = parse_manifest(blob[:cut + len(marker)].decode('utf-8'))
    except UnicodeDecodeError:
        raise CheckpointError('manifest is not valid UTF-8')
    if manifest.get('format_version') != str(FORMAT_VERSION):
        raise CheckpointError('unsupported format version {0}'.format(manifest.get('format_version')))
    section = blob[cut + len(marker):]
    expected = int(manifest.get('tensor_bytes', -1))
    if len(section) != expected:
        raise CheckpointError('tensor section holds {0} bytes, manifest declares {1}'.format(len(section), expected))
    if tools.md5_bytes(section) != manifest.get('tensor_md5'):
        raise CheckpointError('tensor section digest mismatch')
    tensors = OrderedDict()
    i = 0
    while 'tensor.{0}'.format(i) in manifest:
        name, shape_text, offset = manifest['tensor.{0}'.format(i)].split(' ')
        shape = _shape_value(shape_text)
        offset = int(offset)
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(section):
            raise CheckpointError('tensor {0} runs past the tensor section'.format(name))
        if name in tensors:
            raise CheckpointError('tensor {0} appears twice'.format(name))
        tensors[name] = np.frombuffer(section[offset:end], dtype = '<f8').astype(np.float64).reshape(shape)
        i += 1
    return(manifest, tensors)

def _routing_from_manifest(manifest, depth):
    routing = []
    for l in range(depth):
        experts = tools.parse_int_list(manifest['prune.layer.{0}.experts'.format(l)])
        decisions = OrderedDict()
        prefix = 'prune.layer.{0}.route.'.format(l)
        for key, value in manifest.items():
            if not key.startswith(prefix):
                continue
            j = int(key[len(prefix):])
            fields = dict(item.split('=', 1) for item in value.split(';'))
            decisions[j] = (_unhex_list(fields['probs']), tools.parse_int_list(fields['selected']), _unhex_list(fields['gates']))
        routing.append(pr.LayerRouting(experts, OrderedDict(sorted(decisions.items()))))
    return(routing)

def load_checkpoint(path):
    """
    Rebuild a ``MapexModel`` or ``PrunedModel`` from a checkpoint

    Raises
    ------
    CheckpointError
        missing file, unsupported version, truncated or corrupted tensor section, or parameters whose names or
        shapes do not match the model the manifest describes
    """
    manifest, tensors = read_checkpoint(path)
    try:
        values = OrderedDict()
        for key, value in manifest.items():
            if key.startswith('model.'):
                name = key[len('model.'):]
                values[name] = value if name == 'modalities' else _coerce_model_value(name, value)
        config = mx.ModelConfig.from_dict(values)
        net = mx.MapexModel(config)
        if manifest.get('kind') == 'pruned':
            spec = pr.PruneSpec.from_text(manifest['prune.spec'])
            routing = _routing_from_manifest(manifest, config.depth)
            modality_ids = tools.parse_int_list(manifest['modalities'])
            net = pr.apply_routing(net, modality_ids, routing, spec, live = manifest.get('prune.live') == 'true')
    except CheckpointError:
        raise
    except (MapexError, KeyError, ValueError) as e:
        raise CheckpointError('manifest does not describe a valid model: {0}'.format(e))
    named = OrderedDict(net.named_parameters())
    if list(named.keys()) != list(tensors.keys()):
        missing = [n for n in named if n not in tensors]
        extra = [n for n in tensors if n not in named]
        raise CheckpointError('parameter names differ from the model; missing {0}, unexpected {1}'.format(missing[:3], extra[:3]))
    for name, p in named.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError('parameter {0}: shape {1} in file, {2} in model'.format(name, tensors[name].shape, p.shape))
    for name, p in named.items():
        p.data = np.array(tensors[name], dtype = np.float64, order = 'C')
        p.grad = np.zeros_like(p.data)
    net.step = int(manifest.get('step', 0))
    net.optimizer_digest = manifest.get('optimizer', '')
    logger.info('loaded {0} from {1}'.format(net, path))
    return(net)
