#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
The mixture-of-modality-experts masked autoencoder

Each modality is split into P x P patches and embedded by its own linear map. Every token gets a 2-D sinusoidal
position code and the learnable embedding of its modality; a learnable end-of-modality token closes each modality's
run of tokens. The encoder is a stack of pre-norm transformer blocks whose feed-forward layer is replaced by a set of
expert feed-forward nets. Which experts process a token is decided by its modality alone, never by its content.
A shared decoder rebuilds each modality in its own pass, with a per-modality output head.

Examples
--------
Example usage::

    cfg = ModelConfig(modalities = [('RGBish', 3), ('SARish', 1)], image_size = 32)
    model = MapexModel(cfg)
    with autodiff.no_grad():
        features = forward_features(model, planes, active_modalities = [0, 1])
"""
import logging
logger = logging.getLogger("model")
logger.debug("loading model module")

import copy
from collections import OrderedDict

import numpy as np

import autodiff as ad
from autodiff import Tensor, Parameter
from tools import ConfigError, ContractError, ModalityUnavailableError

# ~~~~ GLOBALS ~~~~~~ #
ROUTING_MODES = ('deterministic', 'pos-embed', 'modality')

default_model_config = {
    'dim': 64,
    'depth': 4,
    'heads': 4,
    'num_experts': 8,
    'expert_hidden': 128,
    'top_k': 2,
    'routing': 'modality',
    'shared_expert': False,
    'decoder_depth': 2,
    'decoder_dim': 48,
    'decoder_heads': 4,
    'decoder_hidden': 96,
    'patch_size': 8,
    'image_size': 32,
    'mask_ratio': 0.75,
    'seed': 0,
}


# ~~~~ POSITION CODES ~~~~~~ #
def get_1d_sincos_pos_embed_from_grid(embed_dim, pos):
    """
    Sinusoidal code of a list of positions

    Parameters
    ----------
    embed_dim: int
        output dimension for each position, even
    pos: numpy.ndarray
        positions to encode, any shape; flattened to ``(M,)``

    Returns
    -------
    numpy.ndarray
        ``(M, embed_dim)``, sines in the first half and cosines in the second
    """
    if embed_dim % 2 != 0:
        raise ConfigError('sinusoidal code dimension must be even', key = 'dim')
    omega = np.arange(embed_dim // 2, dtype = np.float64)
    omega /= embed_dim / 2.
    omega = 1. / 10000**omega
    pos = np.asarray(pos, dtype = np.float64).reshape(-1)
    out = np.einsum('m,d->md', pos, omega)
    return(np.concatenate([np.sin(out), np.cos(out)], axis = 1))

def get_2d_sincos_pos_embed(embed_dim, grid_size):
    """
    Sinusoidal code of a square patch grid; half of the dimensions encode the row, half the column

    Returns
    -------
    numpy.ndarray
        ``(grid_size * grid_size, embed_dim)`` in row-major patch order
    """
    if embed_dim % 4 != 0:
        raise ConfigError('2-D sinusoidal code dimension must be divisible by 4', key = 'dim')
    grid_h = np.arange(grid_size, dtype = np.float64)
    grid_w = np.arange(grid_size, dtype = np.float64)
    grid = np.stack(np.meshgrid(grid_w, grid_h), axis = 0)
    emb_h = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[0])
    emb_w = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[1])
    return(np.concatenate([emb_h, emb_w], axis = 1))


# ~~~~ PATCHES ~~~~~~ #
def patchify(planes, patch_size):
    """
    ``[B, C, H, W]`` planes to ``[B, T, P*P*C]`` patch rows, patches in row-major grid order
    """
    planes = np.asarray(planes, dtype = np.float64)
    if planes.ndim != 4:
        raise ContractError('patchify expects [B, C, H, W] planes, got shape {0}'.format(planes.shape))
    b, c, height, width = planes.shape
    p = patch_size
    if height % p != 0 or width % p != 0:
        raise ConfigError('image {0}x{1} is not divisible by patch size {2}'.format(height, width, p), key = 'patch_size')
    h, w = height // p, width // p
    x = planes.reshape(b, c, h, p, w, p)
    x = np.einsum('nchpwq->nhwpqc', x)
    return(x.reshape(b, h * w, p * p * c))

def unpatchify(patches, patch_size, channels):
    """
    ``[B, T, P*P*C]`` patch rows back to ``[B, C, H, W]`` planes
    """
    patches = np.asarray(patches, dtype = np.float64)
    b, t, _ = patches.shape
    p = patch_size
    h = w = int(round(np.sqrt(t)))
    if h * w != t:
        raise ContractError('unpatchify expects a square patch grid, got {0} patches'.format(t))
    x = patches.reshape(b, h, w, p, p, channels)
    x = np.einsum('nhwpqc->nchpwq', x)
    return(x.reshape(b, channels, h * p, w * p))


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class ModelConfig(object):
    """
    Architecture hyperparameters

    Parameters
    ----------
    modalities: list
        ``(name, channel_count)`` per modality; the list position is the modality id
    **kwargs:
        any key of ``default_model_config``
    """
    def __init__(self, modalities, **kwargs):
        unknown = [key for key in kwargs if key not in default_model_config]
        if unknown:
            raise ConfigError('unknown model setting', key = unknown[0])
        values = dict(default_model_config)
        values.update(kwargs)
        self.modalities = [(str(name), int(channels)) for name, channels in modalities]
        for key, value in values.items():
            setattr(self, key, value)
        self.validate()

    @property
    def num_modalities(self):
        return(len(self.modalities))

    @property
    def grid_size(self):
        return(self.image_size // self.patch_size)

    @property
    def num_patches(self):
        return(self.grid_size * self.grid_size)

    def validate(self):
        """
        Check the architecture invariants, raising ``ConfigError`` on the first violation
        """
        if self.num_modalities < 1:
            raise ConfigError('at least one modality is required', key = 'modalities')
        if any(c < 1 for _, c in self.modalities):
            raise ConfigError('channel counts must be >= 1', key = 'modalities')
        if self.dim % self.heads != 0:
            raise ConfigError('dim {0} is not divisible by {1} heads'.format(self.dim, self.heads), key = 'heads')
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError('decoder dim {0} is not divisible by {1} heads'.format(self.decoder_dim, self.decoder_heads), key = 'decoder_heads')
        if self.dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ConfigError('token dims must be divisible by 4', key = 'dim')
        if self.routing not in ROUTING_MODES:
            raise ConfigError('routing must be one of {0}'.format(', '.join(ROUTING_MODES)), key = 'routing')
        if self.num_experts < 1:
            raise ConfigError('at least one expert is required', key = 'num_experts')
        if self.routing == 'deterministic' and self.num_experts < self.num_modalities:
            raise ConfigError('deterministic routing needs at least one expert per modality', key = 'num_experts')
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError('top_k must lie in [1, {0}]'.format(self.num_experts), key = 'top_k')
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError('mask ratio must lie in (0, 1)', key = 'mask_ratio')
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigError('image size {0} is not divisible by patch size {1}'.format(self.image_size, self.patch_size), key = 'patch_size')
        if self.depth < 0 or self.decoder_depth < 0:
            raise ConfigError('depth must be non-negative', key = 'depth')

    def to_dict(self):
        values = OrderedDict((key, getattr(self, key)) for key in sorted(default_model_config))
        values['modalities'] = ','.join('{0}:{1}'.format(name, c) for name, c in self.modalities)
        return(values)

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        modalities = values.pop('modalities')
        if isinstance(modalities, str):
            modalities = [(item.split(':')[0], int(item.split(':')[1])) for item in modalities.split(',') if item]
        return(cls(modalities = modalities, **values))

    def __eq__(self, other):
        return(isinstance(other, ModelConfig) and self.to_dict() == other.to_dict())

    def __repr__(self):
        return('ModelConfig({0})'.format(', '.join('{0}={1}'.format(k, v) for k, v in self.to_dict().items())))


class Linear(object):
    """
    Affine map ``x @ weight + bias``; Xavier-uniform weight, zero bias
    """
    def __init__(self, in_dim, out_dim, rng, bias = True):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Parameter(rng.uniform(-limit, limit, size = (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return(y)

    def named_parameters(self, prefix):
        yield(prefix + '.weight', self.weight)
        if self.bias is not None:
            yield(prefix + '.bias', self.bias)


class LayerNorm(object):
    def __init__(self, dim):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x):
        return(ad.layer_norm(x, self.gamma, self.beta))

    def named_parameters(self, prefix):
        yield(prefix + '.gamma', self.gamma)
        yield(prefix + '.beta', self.beta)


class FeedForward(object):
    """
    Two-layer perceptron ``fc2(gelu(fc1(x)))``; the shape of every expert
    """
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return(self.fc2(ad.gelu(self.fc1(x))))

    def named_parameters(self, prefix):
        for item in self.fc1.named_parameters(prefix + '.fc1'):
            yield(item)
        for item in self.fc2.named_parameters(prefix + '.fc2'):
            yield(item)


class Attention(object):
    """
    Multi-head self-attention over the full token sequence

    The query/key/value projection has no bias. ``last_attention`` keeps the softmax weights of the latest call.
    """
    def __init__(self, dim, heads, rng):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias = False)
        self.proj = Linear(dim, dim, rng)
        self.last_attention = None

    def __call__(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * self.scale
        attn = ad.softmax(scores, axis = -1)
        self.last_attention = attn.data
        out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return(self.proj(out))

    def named_parameters(self, prefix):
        for item in self.qkv.named_parameters(prefix + '.qkv'):
            yield(item)
        for item in self.proj.named_parameters(prefix + '.proj'):
            yield(item)


class RoutingDecision(object):
    """
    Experts chosen for every token of one modality in one MoE layer

    Attributes
    ----------
    modality_id: int
    probs: Tensor
        ``[e]`` routing probabilities over the original expert ids
    selected: list
        selected original expert ids, ascending
    gates: Tensor
        ``[len(selected)]`` gate weights, aligned with ``selected``, summing to 1
    """
    def __init__(self, modality_id, probs, selected, gates):
        self.modality_id = int(modality_id)
        self.probs = probs
        self.selected = [int(i) for i in selected]
        self.gates = gates

    def key(self):
        """
        Hashable value identity of the decision, used for consistency checks
        """
        return((self.modality_id, tuple(self.selected), tuple(np.round(self.gates.data, 15)), tuple(np.round(self.probs.data, 15))))

    def __repr__(self):
        return('RoutingDecision(modality={0}, selected={1}, gates={2})'.format(self.modality_id, self.selected, np.round(self.gates.data, 4).tolist()))


class Router(object):
    """
    Linear map ``W_r`` (D x e, no bias) from a modality code to expert logits

    In ``deterministic`` mode the router holds no weights.
    """
    def __init__(self, dim, num_experts, mode, rng):
        self.dim = dim
        self.num_experts = num_experts
        self.mode = mode
        self.weight = None
        if mode != 'deterministic':
            self.weight = Parameter(rng.normal(0.0, 0.02, size = (dim, num_experts)))

    def router_input(self, modality_id, modality_embedding):
        """
        Vector fed to the router: the learnable modality embedding, or a sinusoidal code of the modality index
        """
        if self.mode == 'pos-embed':
            return(Tensor(get_1d_sincos_pos_embed_from_grid(self.dim, np.array([modality_id]))))
        return(ad.reshape(modality_embedding, (1, self.dim)))

    def probabilities(self, modality_id, modality_embedding = None):
        """
        ``softmax(W_r . input)`` over all e experts, shape ``[e]``
        """
        if self.mode == 'deterministic':
            probs = np.zeros(self.num_experts)
            probs[modality_id % self.num_experts] = 1.0
            return(Tensor(probs))
        logits = ad.matmul(self.router_input(modality_id, modality_embedding), self.weight)
        return(ad.reshape(ad.softmax(logits, axis = -1), (self.num_experts,)))

    def named_parameters(self, prefix):
        if self.weight is not None:
            yield(prefix + '.weight', self.weight)


class MoELayer(object):
    """
    Routed expert feed-forward layer, with an optional shared expert

    Attributes
    ----------
    experts: list
        retained expert nets
    expert_ids: list
        original id of each retained expert, ascending
    calls: dict
        number of evaluations per original expert id since the last ``reset_counters``
    frozen: dict
        ``modality_id -> (probs, selected, gates)`` arrays fixed at pruning time; ``None`` on a full model
    allowed: dict
        ``modality_id -> candidate original ids`` used by live routing on a pruned model; ``None`` on a full model
    """
    def __init__(self, config, rng):
        self.dim = config.dim
        self.num_experts = config.num_experts
        self.top_k = config.top_k
        self.mode = config.routing
        self.router = Router(config.dim, config.num_experts, config.routing, rng)
        self.experts = [FeedForward(config.dim, config.expert_hidden, rng) for _ in range(config.num_experts)]
        self.expert_ids = list(range(config.num_experts))
        self.shared = FeedForward(config.dim, config.expert_hidden, rng) if config.shared_expert else None
        self.frozen = None
        self.allowed = None
        self.live = False
        self.reset_counters()

    def reset_counters(self):
        self.calls = {i: 0 for i in self.expert_ids}
        self.shared_calls = 0

    def expert(self, original_id):
        try:
            return(self.experts[self.expert_ids.index(original_id)])
        except ValueError:
            raise ModalityUnavailableError('expert {0} is not part of this model'.format(original_id))

    def decide(self, modality_id, modality_embedding = None):
        """
        Routing decision of one modality; depends on ``modality_id`` only
        """
        if self.frozen is not None and not self.live:
            if modality_id not in self.frozen:
                raise ModalityUnavailableError('no routing stored for modality {0}'.format(modality_id))
            probs, selected, gates = self.frozen[modality_id]
            return(RoutingDecision(modality_id, Tensor(probs), selected, Tensor(gates)))
        if self.mode == 'deterministic':
            probs = self.router.probabilities(modality_id)
            selected = [modality_id % self.num_experts]
            return(RoutingDecision(modality_id, probs, selected, Tensor(np.ones(1))))
        probs = self.router.probabilities(modality_id, modality_embedding)
        candidates = None
        if self.allowed is not None:
            if modality_id not in self.allowed:
                raise ModalityUnavailableError('no retained experts for modality {0}'.format(modality_id))
            candidates = self.allowed[modality_id]
        selected, _ = topk_select(probs.data, self.top_k, candidates = candidates)
        picked = ad.gather(probs, selected)
        gates = picked / ad.sum(picked)
        return(RoutingDecision(modality_id, probs, selected, gates))

    def __call__(self, x, decision):
        """
        ``sum_i gate_i * expert_i(x)`` over the selected experts, plus the shared expert when present
        """
        out = None
        for position, original_id in enumerate(decision.selected):
            y = self.expert(original_id)(x)
            self.calls[original_id] += 1
            term = y * ad.reshape(decision.gates[position], (1,))
            out = term if out is None else out + term
        if self.shared is not None:
            self.shared_calls += 1
            out = out + self.shared(x)
        return(out)

    def named_parameters(self, prefix):
        for item in self.router.named_parameters(prefix + '.router'):
            yield(item)
        for original_id, expert in zip(self.expert_ids, self.experts):
            for item in expert.named_parameters('{0}.expert.{1}'.format(prefix, original_id)):
                yield(item)
        if self.shared is not None:
            for item in self.shared.named_parameters(prefix + '.shared'):
                yield(item)


class EncoderBlock(object):
    """
    Pre-norm block: ``x + attn(norm1(x))`` then ``x + moe(norm2(x))``
    """
    def __init__(self, config, rng):
        self.norm1 = LayerNorm(config.dim)
        self.attn = Attention(config.dim, config.heads, rng)
        self.norm2 = LayerNorm(config.dim)
        self.moe = MoELayer(config, rng)

    def __call__(self, x, segments, decisions):
        x = x + self.attn(self.norm1(x))
        x = x + moe_forward(self.moe, self.norm2(x), segments, decisions)
        return(x)

    def named_parameters(self, prefix):
        for name, part in (('norm1', self.norm1), ('attn', self.attn), ('norm2', self.norm2), ('moe', self.moe)):
            for item in part.named_parameters('{0}.{1}'.format(prefix, name)):
                yield(item)


class DecoderBlock(object):
    """
    Pre-norm block with a plain feed-forward layer
    """
    def __init__(self, dim, heads, hidden, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, hidden, rng)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return(x)

    def named_parameters(self, prefix):
        for name, part in (('norm1', self.norm1), ('attn', self.attn), ('norm2', self.norm2), ('mlp', self.mlp)):
            for item in part.named_parameters('{0}.{1}'.format(prefix, name)):
                yield(item)


class Segment(object):
    """
    Span ``[start, stop)`` of one modality in the encoder sequence; the last position holds its end-of-modality token
    """
    def __init__(self, modality_id, start, stop, dropped = False):
        self.modality_id = modality_id
        self.start = start
        self.stop = stop
        self.dropped = dropped

    @property
    def length(self):
        return(self.stop - self.start)

    @property
    def patch_positions(self):
        return(list(range(self.start, self.stop - 1)))

    def __repr__(self):
        return('Segment(modality={0}, [{1}, {2}), dropped={3})'.format(self.modality_id, self.start, self.stop, self.dropped))


class TokenSequence(object):
    """
    Encoder input: ``x`` of shape ``[B, L, D]`` and the modality segments laid out in it
    """
    def __init__(self, x, segments):
        self.x = x
        self.segments = segments

    @property
    def length(self):
        return(self.x.shape[1])

    def segment(self, modality_id):
        for seg in self.segments:
            if seg.modality_id == modality_id:
                return(seg)
        raise ModalityUnavailableError('modality {0} is not part of the sequence'.format(modality_id))

    def token_counts(self, include_dropped = False):
        return(OrderedDict((s.modality_id, s.length) for s in self.segments if include_dropped or not s.dropped))


class MapexModel(object):
    """
    Full mixture-of-modality-experts masked autoencoder

    Parameters
    ----------
    config: ModelConfig
        architecture; ``config.seed`` seeds the parameter initialization

    Attributes
    ----------
    embedders, modality_tokens, eom_tokens, heads: OrderedDict
        per-modality parts keyed by modality id
    blocks: list
        encoder blocks
    decoder_lengths: list
        sequence length of every decoder pass since the last ``reset_counters``
    """
    def __init__(self, config):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.dim
        p = config.patch_size
        self.pos_embed = get_2d_sincos_pos_embed(d, config.grid_size)
        self.decoder_pos_embed = get_2d_sincos_pos_embed(config.decoder_dim, config.grid_size)
        self.embedders = OrderedDict()
        for j, (name, channels) in enumerate(config.modalities):
            self.embedders[j] = Linear(p * p * channels, d, rng)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size = d))
        self.modality_tokens = OrderedDict((j, Parameter(rng.normal(0.0, 0.02, size = d))) for j in range(config.num_modalities))
        self.eom_tokens = OrderedDict((j, Parameter(rng.normal(0.0, 0.02, size = d))) for j in range(config.num_modalities))
        self.blocks = [EncoderBlock(config, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(d)
        self.decoder_embed = Linear(d, config.decoder_dim, rng)
        self.decoder_blocks = [DecoderBlock(config.decoder_dim, config.decoder_heads, config.decoder_hidden, rng) for _ in range(config.decoder_depth)]
        self.decoder_norm = LayerNorm(config.decoder_dim)
        self.heads = OrderedDict()
        for j, (name, channels) in enumerate(config.modalities):
            self.heads[j] = Linear(config.decoder_dim, p * p * channels, rng)
        self.last_decisions = None
        self.decoder_lengths = []
        self.step = 0
        self.optimizer_digest = ""

    @property
    def modality_ids(self):
        return(list(self.embedders.keys()))

    @property
    def num_patches(self):
        return(self.config.num_patches)

    def channels(self, modality_id):
        return(self.config.modalities[modality_id][1])

    def modality_name(self, modality_id):
        return(self.config.modalities[modality_id][0])

    def check_modalities(self, modality_ids):
        for j in modality_ids:
            if j not in self.embedders:
                raise ModalityUnavailableError('modality {0} is not available in this model'.format(j))

    def moe_layers(self):
        return([block.moe for block in self.blocks])

    def reset_counters(self):
        for layer in self.moe_layers():
            layer.reset_counters()
        self.decoder_lengths = []

    def named_parameters(self):
        """
        ``(canonical name, Parameter)`` pairs in a fixed order
        """
        for j, embedder in self.embedders.items():
            for item in embedder.named_parameters('embed.{0}'.format(j)):
                yield(item)
        yield('tokens.mask', self.mask_token)
        for j, token in self.modality_tokens.items():
            yield('tokens.modality.{0}'.format(j), token)
        for j, token in self.eom_tokens.items():
            yield('tokens.eom.{0}'.format(j), token)
        for l, block in enumerate(self.blocks):
            for item in block.named_parameters('encoder.{0}'.format(l)):
                yield(item)
        for item in self.norm.named_parameters('encoder.norm'):
            yield(item)
        for item in self.decoder_embed.named_parameters('decoder.embed'):
            yield(item)
        for l, block in enumerate(self.decoder_blocks):
            for item in block.named_parameters('decoder.{0}'.format(l)):
                yield(item)
        for item in self.decoder_norm.named_parameters('decoder.norm'):
            yield(item)
        for j, head in self.heads.items():
            for item in head.named_parameters('decoder.head.{0}'.format(j)):
                yield(item)

    def parameters(self):
        return([p for _, p in self.named_parameters()])

    def state_dict(self):
        return(OrderedDict((name, p.data) for name, p in self.named_parameters()))

    def param_count(self):
        return(int(np.sum([p.size for p in self.parameters()])))

    def copy(self):
        return(copy.deepcopy(self))

    def __repr__(self):
        return('{0}(modalities={1}, routing={2}, params={3})'.format(type(self).__name__, self.modality_ids, self.config.routing, self.param_count()))


class PrunedModel(MapexModel):
    """
    A ``MapexModel`` restricted to a downstream modality set and the union of their top-k experts

    Attributes
    ----------
    prune_spec: object
        the ``prune.PruneSpec`` the model was built from
    remap: list
        per encoder layer, ``{original expert id: position in the pruned layer}``
    """
    def __init__(self, *args, **kwargs):
        raise ContractError('PrunedModel is built by prune.prune')

    @property
    def frozen(self):
        return(all(not layer.live for layer in self.moe_layers()))

    def set_live_routing(self, live = True):
        """
        Switch between frozen gates (default) and live routing restricted to each modality's retained experts
        """
        for layer in self.moe_layers():
            layer.live = bool(live)


# ~~~~ FORWARD OPERATIONS ~~~~~~ #
def topk_select(probs, k, candidates = None):
    """
    Indices of the ``k`` largest probabilities and their renormalized gate weights

    Parameters
    ----------
    probs: numpy.ndarray
        ``[e]`` probabilities
    k: int
        number of experts to keep; reduced to ``len(candidates)`` when fewer candidates are given
    candidates: list
        restrict the selection to these indices

    Returns
    -------
    tuple
        ``(selected, gates)``: ascending index list and the gate weights aligned with it

    Notes
    -----
    Ties rank the lower index first.

    Examples
    --------
    Example usage::

        topk_select(np.array([0.1, 0.5, 0.3, 0.1]), 2)
        # ([1, 2], array([0.625, 0.375]))
    """
    probs = np.asarray(probs, dtype = np.float64)
    if not 1 <= k <= probs.shape[0]:
        raise ContractError('top-k: k={0} outside [1, {1}]'.format(k, probs.shape[0]))
    order = np.argsort(-probs, kind = 'stable')
    if candidates is not None:
        allowed = set(int(c) for c in candidates)
        order = [i for i in order if int(i) in allowed]
    selected = sorted(int(i) for i in order[:k])
    if not selected:
        raise ContractError('top-k: no candidate experts')
    picked = probs[selected]
    total = np.sum(picked)
    if total <= 0:
        return(selected, np.full(len(selected), 1.0 / len(selected)))
    return(selected, picked / total)

def route(model, layer_index, modality_id, token = None):
    """
    Routing decision of ``modality_id`` in encoder layer ``layer_index``; ``token`` never influences the result
    """
    if modality_id < 0 or modality_id >= model.config.num_modalities:
        raise ContractError('modality id {0} out of range'.format(modality_id))
    layer = model.blocks[layer_index].moe
    return(layer.decide(modality_id, model.modality_tokens.get(modality_id)))

def route_all(model, modality_ids):
    """
    Per-layer ``{modality_id: RoutingDecision}`` for the given modalities
    """
    decisions = []
    for block in model.blocks:
        decisions.append(OrderedDict((j, block.moe.decide(j, model.modality_tokens.get(j))) for j in modality_ids))
    return(decisions)

def moe_forward(layer, x, segments, decisions):
    """
    Apply an MoE layer to a ``[B, L, D]`` sequence; each segment uses its modality's decision

    End-of-modality tokens are part of their segment and follow its routing.
    """
    parts = []
    for seg in segments:
        xs = x[:, seg.start:seg.stop, :]
        parts.append(layer(xs, decisions[seg.modality_id]))
    if len(parts) == 1:
        return(parts[0])
    return(ad.concat(parts, axis = 1))

def embed_modality(model, modality_id, planes):
    """
    Patch tokens of one modality, ``[B, T, D]``: ``embed(patch) + position code + modality embedding``
    """
    model.check_modalities([modality_id])
    patches = patchify(planes, model.config.patch_size)
    if patches.shape[1] != model.num_patches:
        raise ContractError('modality {0}: expected {1} patches, got {2}'.format(modality_id, model.num_patches, patches.shape[1]))
    tokens = model.embedders[modality_id](Tensor(patches))
    return(tokens + model.pos_embed + model.modality_tokens[modality_id])

def patch_embed(model, planes, active_modalities, keep = None, dropped = ()):
    """
    Build the encoder input sequence ``[mod_0 tokens, EOM_0, mod_1 tokens, EOM_1, ...]``

    Parameters
    ----------
    model: MapexModel
    planes: dict
        ``modality_id -> [B, C_j, H, W]`` arrays
    active_modalities: list
        modality ids to include, laid out in ascending order
    keep: dict
        optional ``modality_id -> [B, T_vis]`` visible patch positions; all patches are kept when missing
    dropped: collection
        modality ids whose tokens (end-of-modality token included) are replaced by zeros

    Returns
    -------
    TokenSequence
    """
    active = sorted(set(int(j) for j in active_modalities))
    if not active:
        raise ContractError('patch_embed needs at least one active modality')
    model.check_modalities(active)
    d = model.config.dim
    batch = None
    parts = []
    segments = []
    offset = 0
    for j in active:
        if batch is None:
            batch = planes[j].shape[0]
        tokens = embed_modality(model, j, planes[j])
        if keep is not None and j in keep:
            ids = np.asarray(keep[j], dtype = np.int64)
            tokens = ad.take_along_axis(tokens, ids[:, :, None], axis = 1)
        n = tokens.shape[1] + 1
        if j in dropped:
            part = Tensor(np.zeros((batch, n, d)))
        else:
            eom = ad.reshape(model.eom_tokens[j], (1, 1, d)) + np.zeros((batch, 1, d))
            part = ad.concat([tokens, eom], axis = 1)
        parts.append(part)
        segments.append(Segment(j, offset, offset + n, dropped = j in dropped))
        offset += n
    x = parts[0] if len(parts) == 1 else ad.concat(parts, axis = 1)
    return(TokenSequence(x, segments))

def encoder_forward(model, sequence):
    """
    Run the encoder blocks and the final layer norm over a ``TokenSequence``

    Returns
    -------
    tuple
        ``(encoded [B, L, D], decisions)``; ``decisions`` holds one ``{modality_id: RoutingDecision}`` per layer
    """
    modality_ids = [seg.modality_id for seg in sequence.segments]
    decisions = route_all(model, modality_ids)
    x = sequence.x
    for block, layer_decisions in zip(model.blocks, decisions):
        x = block(x, sequence.segments, layer_decisions)
    x = model.norm(x)
    model.last_decisions = decisions
    return(x, decisions)

def decode_modality(model, encoded, ids_restore, modality_id):
    """
    Reconstruct the patches of one modality from its encoded visible tokens

    Parameters
    ----------
    encoded: Tensor
        ``[B, T_vis, D]`` encodings of the modality's visible patch tokens, end-of-modality token excluded
    ids_restore: numpy.ndarray
        ``[B, T]``; row ``b`` maps each original patch position to its index in ``[visible, masked]`` order
    modality_id: int

    Returns
    -------
    Tensor
        ``[B, T, P*P*C_j]`` predicted pixel values
    """
    model.check_modalities([modality_id])
    t = model.num_patches
    ids_restore = np.asarray(ids_restore, dtype = np.int64)
    b, n_visible, d = encoded.shape
    if ids_restore.shape != (b, t):
        raise ContractError('ids_restore must have shape {0}, got {1}'.format((b, t), ids_restore.shape))
    if n_visible > t:
        raise ContractError('{0} visible tokens exceed the {1} patch positions'.format(n_visible, t))
    if np.any(np.sort(ids_restore, axis = 1) != np.arange(t)[None, :]):
        raise ContractError('ids_restore rows must be permutations of range({0})'.format(t))
    n_masked = t - n_visible
    if n_masked > 0:
        masks = ad.reshape(model.mask_token, (1, 1, d)) + np.zeros((b, n_masked, d))
        full = ad.concat([encoded, masks], axis = 1)
    else:
        full = encoded
    x = ad.take_along_axis(full, ids_restore[:, :, None], axis = 1)
    x = model.decoder_embed(x) + model.decoder_pos_embed
    for block in model.decoder_blocks:
        x = block(x)
    x = model.decoder_norm(x)
    model.decoder_lengths.append(x.shape[1])
    return(model.heads[modality_id](x))

def forward_features(model, planes, active_modalities):
    """
    Image-level features ``[B, D]``: encode all tokens of the active modalities and average the patch tokens

    Raises
    ------
    ModalityUnavailableError
        an active modality is not part of ``model``
    """
    sequence = patch_embed(model, planes, active_modalities)
    x, _ = encoder_forward(model, sequence)
    positions = []
    for seg in sequence.segments:
        positions.extend(seg.patch_positions)
    pooled = ad.gather(x, positions, axis = 1)
    return(ad.mean(pooled, axis = 1))


class Reconstruction(object):
    """
    Output of ``forward_reconstruction``

    Attributes
    ----------
    predictions: OrderedDict
        ``modality_id -> Tensor [B, T, P*P*C_j]`` for every decoded modality
    targets: OrderedDict
        ``modality_id -> [B, T, P*P*C_j]`` patchified input planes
    masks: OrderedDict
        ``modality_id -> [B, T]`` with 1 at masked positions
    decisions: list
        per-layer routing decisions
    token_counts: OrderedDict
        encoder tokens per non-dropped modality
    """
    def __init__(self, predictions, targets, masks, decisions, token_counts):
        self.predictions = predictions
        self.targets = targets
        self.masks = masks
        self.decisions = decisions
        self.token_counts = token_counts

def forward_reconstruction(model, planes, plan, dropped = ()):
    """
    Encode the visible tokens of every modality in ``plan`` and decode each non-dropped modality in its own pass

    Parameters
    ----------
    planes: dict
        ``modality_id -> [B, C_j, H, W]`` normalized planes
    plan: object
        mask plan exposing ``keep``, ``restore`` and ``mask`` dicts keyed by modality id
    dropped: collection
        zeroed modalities; they are encoded as zeros and not decoded
    """
    active = sorted(plan.keep.keys())
    sequence = patch_embed(model, planes, active, keep = plan.keep, dropped = dropped)
    x, decisions = encoder_forward(model, sequence)
    predictions = OrderedDict()
    targets = OrderedDict()
    masks = OrderedDict()
    for seg in sequence.segments:
        if seg.dropped:
            continue
        j = seg.modality_id
        encoded = x[:, seg.start:seg.stop - 1, :]
        predictions[j] = decode_modality(model, encoded, plan.restore[j], j)
        targets[j] = patchify(planes[j], model.config.patch_size)
        masks[j] = plan.mask[j]
    return(Reconstruction(predictions, targets, masks, decisions, sequence.token_counts()))

def build_model(modalities, **kwargs):
    """
    Convenience constructor from ``(name, channels)`` pairs and config keywords
    """
    return(MapexModel(ModelConfig(modalities = modalities, **kwargs)))
