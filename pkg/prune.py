#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Extraction of a modality-specific model from a pretrained mixture-of-modality-experts model

For a downstream modality set and a per-modality expert budget ``k``, every encoder layer keeps only the union of the
top-k experts of the downstream modalities. Patch embedders, modality tokens and decoder heads of the other
modalities are dropped. Routing is frozen at pruning time unless live routing is requested.

Examples
--------
Example usage::

    spec = PruneSpec(modality_ids = [0], k = 2)
    small = prune(pretrained, spec)
    verify_equivalence(pretrained, small, spec, probe_planes)
    # 0.0
"""
import logging
logger = logging.getLogger("prune")
logger.debug("loading prune module")

import copy
from collections import OrderedDict

import numpy as np

import autodiff as ad
import model as mx
from tools import SpecError, ContractError, ModalityUnavailableError


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class PruneSpec(object):
    """
    Downstream modality set and experts per modality

    Parameters
    ----------
    modality_ids: list
        downstream modality ids, a non-empty subset of the pretraining modalities
    k: int
        experts kept per modality and layer
    """
    def __init__(self, modality_ids, k):
        self.modality_ids = sorted(set(int(j) for j in modality_ids))
        self.k = int(k)

    def validate(self, model):
        if not self.modality_ids:
            raise SpecError('the downstream modality set is empty')
        for j in self.modality_ids:
            if j not in model.modality_ids:
                raise SpecError('modality {0} is not a pretraining modality of the model'.format(j))
        if not 1 <= self.k <= model.config.num_experts:
            raise SpecError('k={0} outside [1, {1}]'.format(self.k, model.config.num_experts))

    def to_text(self):
        return('modalities={0};k={1}'.format(','.join(str(j) for j in self.modality_ids), self.k))

    @classmethod
    def from_text(cls, text):
        fields = dict(item.split('=', 1) for item in text.split(';'))
        ids = [int(j) for j in fields['modalities'].split(',') if j != '']
        return(cls(modality_ids = ids, k = int(fields['k'])))

    def __eq__(self, other):
        return(isinstance(other, PruneSpec) and self.modality_ids == other.modality_ids and self.k == other.k)

    def __repr__(self):
        return('PruneSpec({0})'.format(self.to_text()))


class LayerRouting(object):
    """
    Routing of one pruned layer: retained original expert ids and the frozen per-modality decisions

    Attributes
    ----------
    expert_ids: list
        retained original expert ids, ascending
    decisions: OrderedDict
        ``modality_id -> (probs, selected, gates)``
    """
    def __init__(self, expert_ids, decisions):
        self.expert_ids = sorted(int(i) for i in expert_ids)
        self.decisions = decisions

    @property
    def remap(self):
        return(OrderedDict((old, new) for new, old in enumerate(self.expert_ids)))


# ~~~~ CUSTOM FUNCTIONS ~~~~~~ #
def param_count(model):
    """
    Exact number of scalar parameters
    """
    return(model.param_count())

def layer_decision(layer, modality_id, modality_embedding, k, candidates = None):
    """
    Frozen ``(probs, selected, gates)`` of one modality in one full-model layer, computed from its router
    """
    with ad.no_grad():
        if layer.mode == 'deterministic':
            probs = layer.router.probabilities(modality_id).data
            selected = [modality_id % layer.num_experts]
            if candidates is not None and selected[0] not in candidates:
                selected, gates = mx.topk_select(probs, 1, candidates = candidates)
            else:
                gates = np.ones(1)
            return(probs.copy(), selected, np.asarray(gates, dtype = np.float64))
        probs = layer.router.probabilities(modality_id, modality_embedding).data
        selected, gates = mx.topk_select(probs, k, candidates = candidates)
        return(probs.copy(), selected, gates)

def compute_routing(model, spec):
    """
    Per-layer ``LayerRouting`` for a spec: the union of each downstream modality's top-k experts
    """
    routing = []
    for layer in model.moe_layers():
        decisions = OrderedDict()
        union = set()
        for j in spec.modality_ids:
            decisions[j] = layer_decision(layer, j, model.modality_tokens[j], spec.k)
            union.update(decisions[j][1])
        routing.append(LayerRouting(sorted(union), decisions))
    return(routing)

def apply_routing(model, modality_ids, routing, spec, live = False):
    """
    Build a ``PrunedModel`` from a full model: keep the given modalities and the experts named by ``routing``

    Returns a new model; ``model`` is not modified.
    """
    pruned = copy.deepcopy(model)
    pruned.__class__ = mx.PrunedModel
    keep = set(modality_ids)
    for j in list(pruned.embedders.keys()):
        if j not in keep:
            del pruned.embedders[j]
            del pruned.modality_tokens[j]
            del pruned.eom_tokens[j]
            del pruned.heads[j]
    if len(routing) != len(pruned.blocks):
        raise ContractError('routing describes {0} layers, model has {1}'.format(len(routing), len(pruned.blocks)))
    for layer, layer_routing in zip(pruned.moe_layers(), routing):
        layer.experts = [layer.expert(i) for i in layer_routing.expert_ids]
        layer.expert_ids = list(layer_routing.expert_ids)
        layer.top_k = spec.k
        layer.frozen = OrderedDict(layer_routing.decisions)
        layer.allowed = OrderedDict((j, list(d[1])) for j, d in layer_routing.decisions.items())
        layer.live = bool(live)
        layer.reset_counters()
    pruned.prune_spec = spec
    pruned.remap = [r.remap for r in routing]
    pruned.last_decisions = None
    return(pruned)

def prune(model, spec, live = False):
    """
    Retain, per layer, the union of the top-k experts of the downstream modalities

    Parameters
    ----------
    model: MapexModel
        a full pretrained model
    spec: PruneSpec
    live: bool
        keep the router live after pruning; routing then selects within each modality's retained experts

    Returns
    -------
    PrunedModel

    Raises
    ------
    SpecError
        empty modality set, unknown modality or k out of range
    """
    if isinstance(model, mx.PrunedModel):
        raise ContractError('prune expects a full model')
    spec.validate(model)
    routing = compute_routing(model, spec)
    pruned = apply_routing(model, spec.modality_ids, routing, spec, live = live)
    sizes = [len(r.expert_ids) for r in routing]
    logger.info('pruned {0} to {1}: experts per layer {2}, parameters {3} -> {4}'.format(
        model.config.routing, spec, sizes, param_count(model), param_count(pruned)))
    return(pruned)

def expert_set_sizes(model):
    """
    Number of experts per encoder layer
    """
    return([len(layer.expert_ids) for layer in model.moe_layers()])

def original_selection(pruned, layer_index, modality_id):
    """
    Selected expert ids of a pruned model's routing mapped back through the remap table
    """
    layer = pruned.moe_layers()[layer_index]
    decision = layer.decide(modality_id, pruned.modality_tokens.get(modality_id))
    inverse = OrderedDict((new, old) for old, new in pruned.remap[layer_index].items())
    return(sorted(inverse[layer.expert_ids.index(i)] for i in decision.selected))

def restore_modalities(pruned, full, modality_ids):
    """
    Give a pruned model the embedders, tokens and heads of further modalities, taken from the full model

    Every restored modality is routed to the top-min(k, |E|) experts of the retained set, ranked by the full
    router's probabilities for that modality and renormalized within the choice. The retained experts are unchanged.

    Returns
    -------
    PrunedModel
        a new model
    """
    restored = copy.deepcopy(pruned)
    for j in modality_ids:
        if j in restored.embedders:
            continue
        if j not in full.embedders:
            raise ModalityUnavailableError('modality {0} is not part of the full model'.format(j))
        restored.embedders[j] = copy.deepcopy(full.embedders[j])
        restored.modality_tokens[j] = copy.deepcopy(full.modality_tokens[j])
        restored.eom_tokens[j] = copy.deepcopy(full.eom_tokens[j])
        restored.heads[j] = copy.deepcopy(full.heads[j])
        for layer, full_layer in zip(restored.moe_layers(), full.moe_layers()):
            k = min(layer.top_k, len(layer.expert_ids))
            decision = layer_decision(full_layer, j, full.modality_tokens[j], k, candidates = layer.expert_ids)
            layer.frozen[j] = decision
            layer.allowed[j] = list(decision[1])
    for attr in ('embedders', 'modality_tokens', 'eom_tokens', 'heads'):
        parts = getattr(restored, attr)
        setattr(restored, attr, OrderedDict((j, parts[j]) for j in sorted(parts)))
    return(restored)

def verify_equivalence(full, pruned, spec, planes):
    """
    Maximum absolute difference between the pooled features of the full and the pruned model on a probe batch

    Parameters
    ----------
    planes: dict
        ``modality_id -> [B, C_j, H, W]``; only modalities of ``spec`` may appear

    Raises
    ------
    ContractError
        the probe holds a modality outside the prune spec or the shared-expert setting differs
    """
    probe_ids = sorted(planes.keys())
    outside = [j for j in probe_ids if j not in spec.modality_ids or j not in pruned.embedders]
    if outside:
        raise ContractError('probe holds pruned-away modalities {0}'.format(outside))
    if full.config.shared_expert != pruned.config.shared_expert:
        raise ContractError('full and pruned model differ in the shared expert')
    with ad.no_grad():
        a = mx.forward_features(full, planes, probe_ids).data
        b = mx.forward_features(pruned, planes, probe_ids).data
    diff = float(np.max(np.abs(a - b)))
    logger.debug('equivalence probe over modalities {0}: max abs diff {1:.3e}'.format(probe_ids, diff))
    return(diff)
