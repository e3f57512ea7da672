#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Masked-autoencoding pretraining of a ``model.MapexModel``

Every step samples a batch, zeroes a random subset of modalities, masks 75% of the patch tokens of each modality,
encodes the visible tokens, decodes every surviving modality in its own pass and minimizes
``L = L_rec + alpha * L_load``, where ``L_load`` pulls the soft expert utilization toward uniform.
"""
import logging
logger = logging.getLogger("pretrain")
logger.debug("loading pretrain module")

from collections import OrderedDict

import numpy as np

import autodiff as ad
from autodiff import Tensor
import model as mx
import tools
from tools import ConfigError, ContractError, NumericError

# ~~~~ GLOBALS ~~~~~~ #
default_pretrain_config = {
    'steps': 2000,
    'batch_size': 32,
    'lr': 1e-3,
    'beta1': 0.9,
    'beta2': 0.95,
    'weight_decay': 0.05,
    'alpha': 0.01,
    'dropout': 0.0,
    'seed': 0,
    'log_every': 100,
    'eval_every': 200,
}

_STREAM_BATCH = 1
_STREAM_MASK = 2
_STREAM_DROPOUT = 3
_STREAM_VAL = 4


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class MaskPlan(object):
    """
    Per-modality masking of one batch

    Attributes
    ----------
    keep: dict
        ``modality_id -> [B, T_vis]`` visible positions, ascending per row
    masked: dict
        ``modality_id -> [B, T_mask]`` masked positions, ascending per row
    restore: dict
        ``modality_id -> [B, T]`` index of each position within ``[visible, masked]`` order
    mask: dict
        ``modality_id -> [B, T]`` with 1.0 at masked positions
    """
    def __init__(self):
        self.keep = OrderedDict()
        self.masked = OrderedDict()
        self.restore = OrderedDict()
        self.mask = OrderedDict()

    @property
    def modality_ids(self):
        return(list(self.keep.keys()))

    def add(self, modality_id, visible_rows, masked_rows):
        visible = np.asarray(visible_rows, dtype = np.int64)
        masked = np.asarray(masked_rows, dtype = np.int64)
        t = visible.shape[1] + masked.shape[1]
        self.keep[modality_id] = visible
        self.masked[modality_id] = masked
        self.restore[modality_id] = np.argsort(np.concatenate([visible, masked], axis = 1), axis = 1)
        mask = np.zeros((visible.shape[0], t))
        np.put_along_axis(mask, masked, 1.0, axis = 1)
        self.mask[modality_id] = mask


class DropoutDecision(object):
    """
    Outcome of ``modality_dropout``

    Attributes
    ----------
    raw: list
        modality ids zeroed by the Bernoulli draws
    restored: int
        id brought back by the survivor rule, ``None`` when it did not fire
    dropped: list
        modality ids zeroed for the batch
    kept: list
        surviving modality ids
    """
    def __init__(self, modality_ids, raw, restored):
        self.raw = sorted(raw)
        self.restored = restored
        self.dropped = sorted(j for j in raw if j != restored)
        self.kept = [j for j in modality_ids if j not in self.dropped]


class LossBreakdown(object):
    """
    ``total = l_rec + alpha * l_load``; the tensors keep their graph for back-propagation
    """
    def __init__(self, l_rec, l_load, alpha):
        self.l_rec = l_rec
        self.l_load = l_load
        self.alpha = float(alpha)
        self.total = l_rec + self.alpha * l_load

    def values(self):
        return(OrderedDict([('l_rec', self.l_rec.item()), ('l_load', self.l_load.item()), ('total', self.total.item())]))


class UtilizationRecord(object):
    """
    Soft expert utilization per MoE layer, one ``[e]`` Tensor per layer
    """
    def __init__(self, layers):
        self.layers = layers

    def values(self):
        if not self.layers:
            return(np.zeros((0, 0)))
        return(np.stack([u.data for u in self.layers], axis = 0))

    def max_deviation(self):
        """
        Per-layer ``max_i |U_i - 1/e|``
        """
        values = self.values()
        if values.size == 0:
            return(np.zeros(0))
        return(np.max(np.abs(values - 1.0 / values.shape[1]), axis = 1))

    def spread(self):
        """
        Per-layer ``max_i U_i - min_i U_i``
        """
        values = self.values()
        if values.size == 0:
            return(np.zeros(0))
        return(values.max(axis = 1) - values.min(axis = 1))


class MetricsLog(object):
    """
    Training history: one entry per step and one per validation pass
    """
    def __init__(self, modality_names, num_experts):
        self.modality_names = modality_names
        self.num_experts = num_experts
        self.steps = []
        self.validation = []

    def add_step(self, step, loss, utilization, modality_mse, dropped):
        entry = OrderedDict([('step', step)])
        entry.update(loss.values())
        entry['utilization'] = utilization.values().copy()
        entry['mse'] = OrderedDict((j, v.item()) for j, v in modality_mse.items())
        entry['dropped'] = list(dropped)
        self.steps.append(entry)

    def add_validation(self, step, l_rec, modality_mse):
        self.validation.append(OrderedDict([('step', step), ('l_rec', l_rec), ('mse', modality_mse)]))

    def final_utilization(self):
        return(self.steps[-1]['utilization'] if self.steps else None)

    def spread_series(self):
        """
        Per-step utilization spread (max - min) averaged over layers
        """
        series = []
        for entry in self.steps:
            u = entry['utilization']
            series.append(float(np.mean(u.max(axis = 1) - u.min(axis = 1))) if u.size else 0.0)
        return(np.array(series))

    def metrics_rows(self):
        """
        Rows of the metrics CSV: ``step,l_rec,l_load,total,layer,u_0..u_{e-1}``, one per step and layer
        """
        rows = []
        for entry in self.steps:
            for layer, u in enumerate(entry['utilization']):
                row = OrderedDict()
                row['step'] = entry['step']
                row['l_rec'] = repr(entry['l_rec'])
                row['l_load'] = repr(entry['l_load'])
                row['total'] = repr(entry['total'])
                row['layer'] = layer
                for i, value in enumerate(u):
                    row['u_{0}'.format(i)] = repr(float(value))
                rows.append(row)
        return(rows)

    def metrics_fieldnames(self):
        return(['step', 'l_rec', 'l_load', 'total', 'layer'] + ['u_{0}'.format(i) for i in range(self.num_experts)])

    def recon_rows(self):
        rows = []
        for entry in self.steps:
            row = OrderedDict([('step', entry['step'])])
            for j, name in self.modality_names.items():
                row['mse_' + name] = repr(entry['mse'][j]) if j in entry['mse'] else ''
            row['dropped'] = ';'.join(self.modality_names[j] for j in entry['dropped'])
            rows.append(row)
        return(rows)

    def validation_rows(self):
        rows = []
        for entry in self.validation:
            row = OrderedDict([('step', entry['step']), ('l_rec', repr(entry['l_rec']))])
            for j, name in self.modality_names.items():
                row['mse_' + name] = repr(entry['mse'][j]) if j in entry['mse'] else ''
            rows.append(row)
        return(rows)

    def write(self, output_dir):
        """
        Write ``metrics.csv``, ``recon.csv`` and ``val.csv`` to ``output_dir``
        """
        tools.mkdirs(output_dir)
        paths = OrderedDict()
        paths['metrics'] = '{0}/metrics.csv'.format(output_dir)
        paths['recon'] = '{0}/recon.csv'.format(output_dir)
        paths['val'] = '{0}/val.csv'.format(output_dir)
        tools.write_dicts_to_csv(self.metrics_rows(), paths['metrics'], fieldnames = self.metrics_fieldnames())
        names = ['mse_' + name for name in self.modality_names.values()]
        tools.write_dicts_to_csv(self.recon_rows(), paths['recon'], fieldnames = ['step'] + names + ['dropped'])
        tools.write_dicts_to_csv(self.validation_rows(), paths['val'], fieldnames = ['step', 'l_rec'] + names)
        return(paths)


# ~~~~ MASKING & DROPOUT ~~~~~~ #
def mask_count(num_tokens, ratio):
    """
    Number of masked positions, ``floor(ratio * T + 0.5)``
    """
    return(int(np.floor(ratio * num_tokens + 0.5)))

def sample_mask(num_tokens, ratio, rng):
    """
    Draw the masked positions of one modality of one sample uniformly without replacement

    Returns
    -------
    tuple
        ``(masked, visible)`` ascending position arrays

    Raises
    ------
    ConfigError
        the rounded count leaves no masked or no visible token

    Examples
    --------
    Example usage::

        masked, visible = sample_mask(16, 0.75, np.random.default_rng(0))
        len(masked), len(visible)
        # (12, 4)
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError('mask ratio must lie in (0, 1)', key = 'mask_ratio')
    n_masked = mask_count(num_tokens, ratio)
    if n_masked <= 0 or n_masked >= num_tokens:
        raise ConfigError('ratio {0} masks {1} of {2} tokens'.format(ratio, n_masked, num_tokens), key = 'mask_ratio')
    order = rng.permutation(num_tokens)
    masked = np.sort(order[:n_masked])
    visible = np.sort(order[n_masked:])
    return(masked, visible)

def build_mask_plan(batch_size, modality_ids, num_tokens, ratio, rng):
    """
    Independent ``sample_mask`` draws for every modality of every sample
    """
    plan = MaskPlan()
    for j in modality_ids:
        visible_rows = []
        masked_rows = []
        for _ in range(batch_size):
            masked, visible = sample_mask(num_tokens, ratio, rng)
            visible_rows.append(visible)
            masked_rows.append(masked)
        plan.add(j, visible_rows, masked_rows)
    return(plan)

def modality_dropout(modality_ids, p, rng):
    """
    Zero each modality of a batch independently with probability ``p``; if every modality is zeroed one uniformly
    chosen modality is restored

    Returns
    -------
    DropoutDecision
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError('modality dropout must lie in [0, 1)', key = 'dropout')
    modality_ids = list(modality_ids)
    draws = rng.random(len(modality_ids))
    raw = [j for j, u in zip(modality_ids, draws) if u < p]
    restored = None
    if modality_ids and len(raw) == len(modality_ids):
        restored = modality_ids[int(rng.integers(len(modality_ids)))]
    return(DropoutDecision(modality_ids, raw, restored))


# ~~~~ LOSSES ~~~~~~ #
def compute_utilization(decisions, token_counts):
    """
    Soft utilization of one layer, ``U_i = sum_m (n_m / N) * w_i^m``

    Parameters
    ----------
    decisions: dict
        ``modality_id -> RoutingDecision`` of the layer
    token_counts: dict
        ``modality_id -> number of routed tokens``; only these modalities count

    Returns
    -------
    Tensor
        ``[e]``, differentiable with respect to the router
    """
    total = float(np.sum(list(token_counts.values())))
    if total <= 0:
        raise ContractError('utilization needs at least one non-dropped modality')
    u = None
    for j, count in token_counts.items():
        term = decisions[j].probs * (count / total)
        u = term if u is None else u + term
    return(u)

def utilization_record(decisions, token_counts):
    return(UtilizationRecord([compute_utilization(layer, token_counts) for layer in decisions]))

def load_balance_loss(utilization):
    """
    ``mean_i (U_i - 1/e)^2`` averaged over the layers of a ``UtilizationRecord`` (or a list of ``[e]`` tensors)

    Examples
    --------
    Example usage::

        load_balance_loss([Tensor([1., 0., 0., 0.])]).item()
        # 0.1875
    """
    layers = utilization.layers if isinstance(utilization, UtilizationRecord) else list(utilization)
    if not layers:
        return(Tensor(np.array(0.0)))
    per_layer = []
    for u in layers:
        u = ad.as_tensor(u)
        per_layer.append(ad.reshape(ad.mean(ad.power(u - 1.0 / u.shape[0], 2)), (1,)))
    if len(per_layer) == 1:
        return(ad.reshape(per_layer[0], ()))
    return(ad.mean(ad.concat(per_layer, axis = 0)))

def reconstruction_loss(recon):
    """
    Mean over decoded modalities of the masked-patch MSE; every modality weighs the same

    Returns
    -------
    tuple
        ``(l_rec, {modality_id: mse})``
    """
    per_modality = OrderedDict()
    for j, pred in recon.predictions.items():
        per_modality[j] = ad.mse_masked(pred, recon.targets[j], recon.masks[j][:, :, None])
    if not per_modality:
        raise ContractError('no modality left to reconstruct')
    total = None
    for value in per_modality.values():
        total = value if total is None else total + value
    return(total / float(len(per_modality)), per_modality)

def compute_loss(model, planes, plan, dropped = (), alpha = 0.01):
    """
    Forward pass and objective of one batch

    Returns
    -------
    tuple
        ``(LossBreakdown, {modality_id: mse}, UtilizationRecord)``
    """
    recon = mx.forward_reconstruction(model, planes, plan, dropped = dropped)
    l_rec, per_modality = reconstruction_loss(recon)
    utilization = utilization_record(recon.decisions, recon.token_counts)
    l_load = load_balance_loss(utilization)
    return(LossBreakdown(l_rec, l_load, alpha), per_modality, utilization)


# ~~~~ TRAINING ~~~~~~ #
def validate_pretrain_config(config):
    full = dict(default_pretrain_config)
    full.update(config or {})
    unknown = [key for key in full if key not in default_pretrain_config]
    if unknown:
        raise ConfigError('unknown pretraining setting', key = unknown[0])
    if int(full['steps']) < 0:
        raise ConfigError('steps must be non-negative', key = 'steps')
    if int(full['batch_size']) < 1:
        raise ConfigError('batch size must be >= 1', key = 'batch_size')
    if float(full['lr']) <= 0:
        raise ConfigError('lr must be positive', key = 'lr')
    if float(full['alpha']) < 0:
        raise ConfigError('alpha must be non-negative', key = 'alpha')
    if not 0.0 <= float(full['dropout']) < 1.0:
        raise ConfigError('modality dropout must lie in [0, 1)', key = 'dropout')
    return(full)

def validation_loss(model, dataset, seed, split = 'val'):
    """
    Masked reconstruction loss of a whole split with a fixed, seeded mask plan and no dropout

    Returns
    -------
    tuple
        ``(l_rec, {modality_id: mse})`` as floats
    """
    modality_ids = model.modality_ids
    planes, _ = dataset.batch(split, modality_ids = modality_ids)
    rng = np.random.default_rng([int(seed), _STREAM_VAL])
    plan = build_mask_plan(dataset.size(split), modality_ids, model.num_patches, model.config.mask_ratio, rng)
    with ad.no_grad():
        recon = mx.forward_reconstruction(model, planes, plan)
        l_rec, per_modality = reconstruction_loss(recon)
    return(l_rec.item(), OrderedDict((j, v.item()) for j, v in per_modality.items()))

def pretrain(model, dataset, config = None):
    """
    Pretrain ``model`` in place on the training split of a normalized dataset

    Parameters
    ----------
    model: MapexModel
    dataset: synthdata.Dataset
        normalized (``dataset.stats`` set); must hold every modality of ``model``
    config: dict
        keys of ``default_pretrain_config``

    Returns
    -------
    tuple
        ``(model, MetricsLog)``

    Raises
    ------
    NumericError
        the loss or a gradient became non-finite; ``step`` holds the step index
    """
    config = validate_pretrain_config(config)
    if dataset.stats is None:
        raise ContractError('pretraining expects a normalized dataset')
    modality_ids = model.modality_ids
    for j in modality_ids:
        dataset.modality(j)
    seed = int(config['seed'])
    rng_batch = np.random.default_rng([seed, _STREAM_BATCH])
    rng_mask = np.random.default_rng([seed, _STREAM_MASK])
    rng_drop = np.random.default_rng([seed, _STREAM_DROPOUT])
    optimizer = ad.AdamW(model.parameters(), lr = float(config['lr']), betas = (float(config['beta1']), float(config['beta2'])), weight_decay = float(config['weight_decay']))
    names = OrderedDict((j, model.modality_name(j)) for j in modality_ids)
    history = MetricsLog(names, model.config.num_experts)
    steps = int(config['steps'])
    batch_size = int(config['batch_size'])
    n_train = dataset.size('train')
    eval_every = int(config['eval_every'])
    log_every = max(int(config['log_every']), 1)

    logger.info('pretraining {0} for {1} steps (batch {2}, alpha {3}, dropout {4})'.format(model, steps, batch_size, config['alpha'], config['dropout']))
    if eval_every > 0:
        l_val, mse_val = validation_loss(model, dataset, seed)
        history.add_validation(0, l_val, mse_val)
        logger.info('step 0: val l_rec {0:.5f}'.format(l_val))

    for step in range(steps):
        indices = rng_batch.choice(n_train, size = batch_size, replace = batch_size > n_train)
        planes, _ = dataset.batch('train', indices, modality_ids = modality_ids)
        drop = modality_dropout(modality_ids, float(config['dropout']), rng_drop)
        plan = build_mask_plan(batch_size, modality_ids, model.num_patches, model.config.mask_ratio, rng_mask)

        optimizer.zero_grad()
        loss, per_modality, utilization = compute_loss(model, planes, plan, dropped = drop.dropped, alpha = float(config['alpha']))
        if not np.isfinite(loss.total.item()):
            raise NumericError('non-finite pretraining loss', step = step)
        ad.backward(loss.total)
        try:
            optimizer.step()
        except NumericError:
            raise NumericError('non-finite gradient during pretraining', step = step)
        history.add_step(step, loss, utilization, per_modality, drop.dropped)

        deviation = utilization.max_deviation()
        if (step + 1) % log_every == 0 or step == steps - 1:
            logger.info('step {0}: l_rec {1:.5f} l_load {2:.3e} total {3:.5f} max|U-1/e| {4:.4f}'.format(
                step + 1, loss.l_rec.item(), loss.l_load.item(), loss.total.item(), float(deviation.max()) if deviation.size else 0.0))
        else:
            logger.debug('step {0}: total {1:.5f} dropped {2}'.format(step + 1, loss.total.item(), drop.dropped))
        if eval_every > 0 and ((step + 1) % eval_every == 0 or step == steps - 1):
            l_val, mse_val = validation_loss(model, dataset, seed)
            history.add_validation(step + 1, l_val, mse_val)
            logger.info('step {0}: val l_rec {1:.5f}'.format(step + 1, l_val))

    model.step += steps
    model.optimizer_digest = optimizer.state.digest()
    return(model, history)
