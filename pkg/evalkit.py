#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Downstream evaluation of pretrained and pruned models

k-NN probing of pooled encoder features, linear fine-tuning with a plateau learning-rate rule, few-shot evaluation,
the expert/modality specialization matrix and the experiment sweeps (routing mode, top-k, modality dropout,
expert size, shared expert).
"""
import logging
logger = logging.getLogger("evalkit")
logger.debug("loading evalkit module")

import copy
from collections import OrderedDict

import numpy as np
from scipy.spatial.distance import cdist

import autodiff as ad
import model as mx
import pretrain
import prune as pr
import synthdata
import tools
from tools import DataError, DimensionError, ConfigError

# ~~~~ GLOBALS ~~~~~~ #
SWEEP_KINDS = ('routing', 'topk', 'dropout', 'expert_size', 'shared_expert')
SWEEP_FIELDS = ['sweep_kind', 'cell_id', 'param_1', 'param_2', 'modality', 'accuracy', 'seed', 'params_count']
DROPOUT_GRID = (0.0, 0.1, 0.5)
FEW_SHOT_GRID = (10, 25)

default_finetune_config = {
    'epochs': 30,
    'lr': 1e-3,
    'weight_decay': 0.05,
    'batch_size': 32,
    'frozen': False,
    'seed': 0,
    'patience': 3,
    'factor': 0.5,
}


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class ProbeResult(object):
    """
    Accuracy of a probe plus the configuration it was obtained with

    Attributes
    ----------
    accuracy: float
        fraction of correct test predictions
    per_class: numpy.ndarray
        accuracy within each true class; ``nan`` for a class absent from the test split
    echo: OrderedDict
        configuration echo (modalities, k, checkpoint id, seed, ...)
    """
    def __init__(self, accuracy, per_class, echo = None, predictions = None):
        self.accuracy = float(accuracy)
        self.per_class = np.asarray(per_class, dtype = np.float64)
        self.echo = OrderedDict(echo or {})
        self.predictions = predictions

    def to_row(self):
        row = OrderedDict([('accuracy', repr(self.accuracy))])
        row['per_class'] = ';'.join(repr(float(v)) for v in self.per_class)
        for key, value in self.echo.items():
            if isinstance(value, (list, tuple)):
                value = ';'.join(str(v) for v in value)
            row[key] = value
        return(row)

    def __repr__(self):
        return('ProbeResult(accuracy={0:.4f}, {1})'.format(self.accuracy, dict(self.echo)))


class SpecializationMatrix(object):
    """
    ``m x m`` accuracy grid: row = modality the model was pruned for, column = modality evaluated

    ``experts`` maps ``(row name, column name)`` to the full-model expert ids the column modality is routed to in
    each encoder layer of the row's pruned model
    """
    def __init__(self, values, modality_names, experts = None):
        self.values = np.asarray(values, dtype = np.float64)
        self.modality_names = list(modality_names)
        self.experts = OrderedDict(experts or {})

    def diagonal_mean(self):
        return(float(np.mean(np.diag(self.values))))

    def off_diagonal_mean(self):
        m = self.values.shape[0]
        if m < 2:
            return(float('nan'))
        mask = ~np.eye(m, dtype = bool)
        return(float(np.mean(self.values[mask])))

    def diagonal_advantage(self):
        return(self.diagonal_mean() - self.off_diagonal_mean())

    def to_rows(self):
        rows = []
        for r, row_name in enumerate(self.modality_names):
            row = OrderedDict([('pruned_for', row_name)])
            for c, col_name in enumerate(self.modality_names):
                row[col_name] = repr(float(self.values[r, c]))
            rows.append(row)
        return(rows)


class ReduceLROnPlateau(object):
    """
    Multiply the learning rate by ``factor`` once the validation loss has not improved for ``patience``
    consecutive epochs; the count restarts after every reduction

    Examples
    --------
    Example usage::

        scheduler = ReduceLROnPlateau(optimizer, factor = 0.5, patience = 3)
        for epoch in range(epochs):
            ...
            scheduler.step(val_loss)
    """
    def __init__(self, optimizer, factor = 0.5, patience = 3):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float('inf')
        self.num_bad_epochs = 0
        self.reductions = 0

    def step(self, val_loss):
        """
        Record one epoch; returns ``True`` when the learning rate was reduced
        """
        if val_loss < self.best:
            self.best = val_loss
            self.num_bad_epochs = 0
            return(False)
        self.num_bad_epochs += 1
        if self.num_bad_epochs >= self.patience:
            self.optimizer.lr = self.optimizer.lr * self.factor
            self.num_bad_epochs = 0
            self.reductions += 1
            logger.debug('plateau: learning rate reduced to {0:.3e}'.format(self.optimizer.lr))
            return(True)
        return(False)


# ~~~~ FEATURES & k-NN ~~~~~~ #
def extract_features(model, dataset, split, modality_ids, batch_size = 128):
    """
    Pooled encoder features ``[N, D]`` of a whole split, without recording gradients
    """
    model.check_modalities(modality_ids)
    n = dataset.size(split)
    if n == 0:
        raise DataError('split {0} is empty'.format(split))
    chunks = []
    with ad.no_grad():
        for start in range(0, n, batch_size):
            indices = np.arange(start, min(start + batch_size, n))
            planes, _ = dataset.batch(split, indices, modality_ids = modality_ids)
            chunks.append(mx.forward_features(model, planes, modality_ids).data)
    return(np.concatenate(chunks, axis = 0))

def accuracy_per_class(labels, predictions, num_classes):
    """
    Overall accuracy and accuracy within each true class
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    correct = labels == predictions
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        members = labels == c
        if np.any(members):
            per_class[c] = float(np.mean(correct[members]))
    return(float(np.mean(correct)), per_class)

def knn_neighbors(train_features, test_features, k):
    """
    Indices ``[N_test, k]`` of the ``k`` nearest training points by Euclidean distance; equal distances rank the
    smaller training index first
    """
    distances = cdist(test_features, train_features, metric = 'euclidean')
    order = np.empty((distances.shape[0], k), dtype = np.int64)
    index = np.arange(distances.shape[1])
    for row in range(distances.shape[0]):
        order[row] = np.lexsort((index, distances[row]))[:k]
    return(order)

def knn_predict(train_features, train_labels, test_features, k = 5, num_classes = None):
    """
    Majority vote among the ``k`` nearest neighbors; a tied vote goes to the smallest class index

    Returns
    -------
    tuple
        ``(predictions [N_test], neighbors [N_test, k])``
    """
    train_labels = np.asarray(train_labels, dtype = np.int64)
    if num_classes is None:
        num_classes = int(train_labels.max()) + 1
    neighbors = knn_neighbors(train_features, test_features, k)
    predictions = np.empty(neighbors.shape[0], dtype = np.int64)
    for row, nn in enumerate(neighbors):
        votes = np.bincount(train_labels[nn], minlength = num_classes)
        predictions[row] = int(np.argmax(votes))
    return(predictions, neighbors)

def knn_eval(train_features, train_labels, test_features, test_labels, k = 5, num_classes = None, echo = None):
    """
    Exact brute-force k-NN probe

    Parameters
    ----------
    train_features, test_features: numpy.ndarray
        ``[N, D]`` feature rows with matching ``D``
    train_labels, test_labels: numpy.ndarray
        integer class labels
    k: int
        neighbors per vote, at most the training split size

    Returns
    -------
    ProbeResult

    Raises
    ------
    DataError
        an empty split, or ``k`` larger than the training split

    Examples
    --------
    Example usage::

        train = np.array([[0.], [1.], [10.], [11.], [12.]])
        knn_eval(train, [0, 0, 1, 1, 1], np.array([[0.5]]), [1], k = 5).accuracy
        # 1.0
    """
    train_features = np.asarray(train_features, dtype = np.float64)
    test_features = np.asarray(test_features, dtype = np.float64)
    train_labels = np.asarray(train_labels, dtype = np.int64)
    test_labels = np.asarray(test_labels, dtype = np.int64)
    if train_features.shape[0] == 0 or test_features.shape[0] == 0:
        raise DataError('k-NN needs non-empty train and test splits')
    if train_features.ndim != 2 or test_features.ndim != 2 or train_features.shape[1] != test_features.shape[1]:
        raise DimensionError('k-NN feature dimensions differ: {0} and {1}'.format(train_features.shape, test_features.shape))
    if not 1 <= k <= train_features.shape[0]:
        raise DataError('k={0} exceeds the {1} training points'.format(k, train_features.shape[0]))
    if num_classes is None:
        num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    predictions, _ = knn_predict(train_features, train_labels, test_features, k = k, num_classes = num_classes)
    accuracy, per_class = accuracy_per_class(test_labels, predictions, num_classes)
    echo = OrderedDict(echo or {})
    echo.setdefault('k', k)
    return(ProbeResult(accuracy, per_class, echo = echo, predictions = predictions))

def knn_probe(model, dataset, modality_ids, k = 5, echo = None, train_split = 'train', test_split = 'test'):
    """
    k-NN probe of a model's pooled features on one modality or a set of modalities
    """
    modality_ids = sorted(modality_ids)
    train_x = extract_features(model, dataset, train_split, modality_ids)
    test_x = extract_features(model, dataset, test_split, modality_ids)
    info = OrderedDict([('modalities', [dataset.modality(j).name for j in modality_ids])])
    info.update(echo or {})
    return(knn_eval(train_x, dataset.labels(train_split), test_x, dataset.labels(test_split), k = k, num_classes = dataset.num_classes, echo = info))

def raw_pixel_knn(dataset, modality_id, k = 5):
    """
    k-NN on the flattened raw planes of one modality
    """
    return(knn_eval(dataset.raw_features('train', modality_id), dataset.labels('train'),
        dataset.raw_features('test', modality_id), dataset.labels('test'), k = k,
        num_classes = dataset.num_classes, echo = {'modalities': [dataset.modality(modality_id).name], 'features': 'raw'}))


# ~~~~ FINE-TUNING ~~~~~~ #
def finetune_parameters(model):
    """
    Encoder-side parameters updated by full fine-tuning; decoder and mask token excluded
    """
    return([p for name, p in model.named_parameters() if not name.startswith('decoder.') and name != 'tokens.mask'])

def finetune(model, dataset, config = None, modality_ids = None, test_split = 'test'):
    """
    Train a linear head on pooled features and report the test accuracy of the best validation epoch

    Parameters
    ----------
    model: MapexModel
        left unchanged; a copy is trained
    dataset: synthdata.Dataset
    config: dict
        keys of ``default_finetune_config``; ``frozen`` trains the head only
    modality_ids: list
        input modalities; all modalities of the model by default

    Returns
    -------
    ProbeResult

    Raises
    ------
    ModalityUnavailableError
        an input modality is not part of the model
    """
    full = dict(default_finetune_config)
    full.update(config or {})
    unknown = [key for key in full if key not in default_finetune_config]
    if unknown:
        raise ConfigError('unknown fine-tuning setting', key = unknown[0])
    if modality_ids is None:
        modality_ids = model.modality_ids
    modality_ids = sorted(modality_ids)
    model.check_modalities(modality_ids)
    epochs = int(full['epochs'])
    frozen = bool(full['frozen'])
    seed = int(full['seed'])
    rng = np.random.default_rng(seed)
    work = copy.deepcopy(model)
    num_classes = dataset.num_classes
    head = mx.Linear(work.config.dim, num_classes, rng)
    params = head.named_parameters('head')
    params = [p for _, p in params]
    if not frozen:
        params = params + finetune_parameters(work)
    optimizer = ad.AdamW(params, lr = float(full['lr']), betas = (0.9, 0.999), weight_decay = float(full['weight_decay']))
    scheduler = ReduceLROnPlateau(optimizer, factor = float(full['factor']), patience = int(full['patience']))

    y_train = dataset.labels('train')
    y_val = dataset.labels('val')
    y_test = dataset.labels(test_split)
    cached = {}
    def features(split, indices = None, grad = False):
        if frozen or not grad:
            if split not in cached or not frozen:
                cached[split] = extract_features(work, dataset, split, modality_ids)
            values = cached[split]
            return(ad.Tensor(values if indices is None else values[indices]))
        planes, _ = dataset.batch(split, indices, modality_ids = modality_ids)
        return(mx.forward_features(work, planes, modality_ids))
    def evaluate(split, labels):
        with ad.no_grad():
            logits = head(features(split))
            loss = ad.cross_entropy(logits, labels).item()
        predictions = np.argmax(logits.data, axis = 1)
        return(loss, predictions)

    val_loss, _ = evaluate('val', y_val)
    _, best_predictions = evaluate(test_split, y_test)
    best = (val_loss, 0)
    lr_history = [optimizer.lr]
    batch_size = int(full['batch_size'])
    n_train = dataset.size('train')
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            indices = order[start:start + batch_size]
            optimizer.zero_grad()
            logits = head(features('train', indices, grad = True))
            loss = ad.cross_entropy(logits, y_train[indices])
            ad.backward(loss)
            optimizer.step()
        val_loss, _ = evaluate('val', y_val)
        if val_loss < best[0]:
            _, best_predictions = evaluate(test_split, y_test)
            best = (val_loss, epoch)
        scheduler.step(val_loss)
        lr_history.append(optimizer.lr)
        logger.debug('finetune epoch {0}: val loss {1:.5f} lr {2:.2e}'.format(epoch, val_loss, optimizer.lr))

    accuracy, per_class = accuracy_per_class(y_test, best_predictions, num_classes)
    echo = OrderedDict([
        ('modalities', [dataset.modality(j).name for j in modality_ids]),
        ('epochs', epochs), ('lr', full['lr']), ('frozen', frozen), ('seed', seed),
        ('best_epoch', best[1]), ('lr_reductions', scheduler.reductions)])
    logger.info('finetune on {0}: best epoch {1}, test accuracy {2:.4f}'.format(echo['modalities'], best[1], accuracy))
    return(ProbeResult(accuracy, per_class, echo = echo, predictions = best_predictions))

def few_shot_eval(model, dataset, k_shot, seed, config = None, modality_ids = None):
    """
    Fine-tune on ``k_shot`` training samples per class and evaluate on the full test split
    """
    subset = synthdata.few_shot_subset(dataset, k_shot, seed)
    full = dict(config or {})
    full.setdefault('seed', seed)
    result = finetune(model, subset, full, modality_ids = modality_ids)
    result.echo['k_shot'] = int(k_shot)
    result.echo['subset_seed'] = int(seed)
    return(result)


# ~~~~ SPECIALIZATION ~~~~~~ #
def specialization_matrix(model, dataset, k, knn_k = 5):
    """
    Prune the model for each modality ``r`` and k-NN probe it on every input modality ``c``

    Off-diagonal cells borrow the patch embedder and tokens of ``c`` from the full model; the pruned model still
    routes ``c`` through its own retained experts.
    """
    ids = model.modality_ids
    values = np.zeros((len(ids), len(ids)))
    experts = OrderedDict()
    for r_pos, r in enumerate(ids):
        pruned = pr.prune(model, pr.PruneSpec([r], k))
        for c_pos, c in enumerate(ids):
            probe_model = pruned if c == r else pr.restore_modalities(pruned, model, [c])
            cell = (model.modality_name(r), model.modality_name(c))
            experts[cell] = [pr.original_selection(probe_model, l, c) for l in range(len(probe_model.moe_layers()))]
            logger.debug('specialization cell {0}: experts per layer {1}'.format(cell, experts[cell]))
            result = knn_probe(probe_model, dataset, [c], k = knn_k)
            values[r_pos, c_pos] = result.accuracy
        logger.info('specialization row {0}: {1}'.format(model.modality_name(r), np.round(values[r_pos], 4).tolist()))
    return(SpecializationMatrix(values, [model.modality_name(j) for j in ids], experts = experts))


# ~~~~ SWEEPS ~~~~~~ #
def expert_size_grid(num_experts, expert_hidden, top_k):
    """
    ``(e, hidden, k)`` cells with a constant ``e * hidden`` and a constant per-modality hidden budget ``k * hidden``
    """
    product = num_experts * expert_hidden
    budget = top_k * expert_hidden
    cells = []
    for factor in (0.5, 1.0, 2.0):
        e = int(num_experts * factor)
        if e < 1 or product % e != 0:
            continue
        hidden = product // e
        k = max(1, min(e, budget // hidden))
        cells.append((e, hidden, k))
    return(cells)

def sweep_row(kind, cell_id, param_1, param_2, modality, accuracy, seed, params_count):
    return(OrderedDict([('sweep_kind', kind), ('cell_id', cell_id), ('param_1', param_1), ('param_2', param_2),
        ('modality', modality), ('accuracy', repr(float(accuracy))), ('seed', seed), ('params_count', int(params_count))]))

def _pretrained(model_settings, modalities, dataset, pretrain_settings, seed):
    settings = dict(model_settings)
    settings['seed'] = seed
    net = mx.MapexModel(mx.ModelConfig(modalities = modalities, **settings))
    train_settings = dict(pretrain_settings)
    train_settings['seed'] = seed
    net, _ = pretrain.pretrain(net, dataset, train_settings)
    return(net)

def _per_modality_rows(kind, cell_id, param_1, param_2, net, dataset, seed, knn_k, k = None):
    rows = []
    for j in net.modality_ids:
        spec = pr.PruneSpec([j], net.config.top_k if k is None else k)
        pruned = pr.prune(net, spec)
        result = knn_probe(pruned, dataset, [j], k = knn_k)
        rows.append(sweep_row(kind, cell_id, param_1, param_2, net.modality_name(j), result.accuracy, seed, pr.param_count(pruned)))
    return(rows)

def sweep(kind, settings, dataset):
    """
    Run one experiment sweep sequentially

    Parameters
    ----------
    kind: str
        one of ``SWEEP_KINDS``
    settings: dict
        ``model`` (ModelConfig keywords without modalities), ``pretrain`` (pretraining config), ``seeds`` (seed
        schedule), ``knn_k``, and for ``topk`` the optional ``k_values``
    dataset: synthdata.Dataset
        normalized dataset shared by every cell

    Returns
    -------
    list
        rows with the ``SWEEP_FIELDS`` columns, in cell order
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError('unknown sweep kind "{0}"'.format(kind), key = 'sweep')
    model_settings = dict(settings['model'])
    model_settings.pop('seed', None)
    pretrain_settings = dict(settings['pretrain'])
    seeds = list(settings.get('seeds', [0]))
    knn_k = int(settings.get('knn_k', 5))
    modalities = [(spec.name, spec.channel_count) for spec in dataset.modalities]
    rows = []
    for seed in seeds:
        if kind == 'routing':
            for mode in mx.ROUTING_MODES:
                cell = dict(model_settings, routing = mode)
                net = _pretrained(cell, modalities, dataset, pretrain_settings, seed)
                rows.extend(_per_modality_rows(kind, 'routing={0}'.format(mode), mode, '', net, dataset, seed, knn_k))
        elif kind == 'topk':
            net = _pretrained(model_settings, modalities, dataset, pretrain_settings, seed)
            k_values = settings.get('k_values') or list(range(1, min(5, net.config.num_experts) + 1))
            for k in k_values:
                rows.extend(_per_modality_rows(kind, 'k={0}'.format(k), k, '', net, dataset, seed, knn_k, k = k))
        elif kind == 'dropout':
            for p in DROPOUT_GRID:
                cell_pretrain = dict(pretrain_settings, dropout = p)
                net = _pretrained(model_settings, modalities, dataset, cell_pretrain, seed)
                rows.extend(_per_modality_rows(kind, 'dropout={0}'.format(p), p, '', net, dataset, seed, knn_k))
        elif kind == 'expert_size':
            grid = expert_size_grid(model_settings.get('num_experts', mx.default_model_config['num_experts']),
                model_settings.get('expert_hidden', mx.default_model_config['expert_hidden']),
                model_settings.get('top_k', mx.default_model_config['top_k']))
            for e, hidden, k in grid:
                cell = dict(model_settings, num_experts = e, expert_hidden = hidden, top_k = k)
                net = _pretrained(cell, modalities, dataset, pretrain_settings, seed)
                rows.extend(_per_modality_rows(kind, 'e={0},hidden={1}'.format(e, hidden), e, hidden, net, dataset, seed, knn_k))
        elif kind == 'shared_expert':
            for shared in (False, True):
                cell = dict(model_settings, shared_expert = shared)
                net = _pretrained(cell, modalities, dataset, pretrain_settings, seed)
                rows.extend(_per_modality_rows(kind, 'shared={0}'.format(int(shared)), int(shared), '', net, dataset, seed, knn_k))
        logger.info('sweep {0}: seed {1} done, {2} rows'.format(kind, seed, len(rows)))
    return(rows)

def mean_accuracy(rows, cell_id):
    values = [float(row['accuracy']) for row in rows if row['cell_id'] == cell_id]
    return(float(np.mean(values)) if values else float('nan'))

def write_sweep_csv(rows, output_file):
    tools.write_dicts_to_csv(rows, output_file, fieldnames = SWEEP_FIELDS)

def write_probe_csv(results, output_file):
    """
    One row per ``ProbeResult``; columns are the union of the rows' keys in first-seen order
    """
    rows = [r.to_row() for r in results]
    fieldnames = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    for row in rows:
        for key in fieldnames:
            row.setdefault(key, '')
    tools.write_dicts_to_csv(rows, output_file, fieldnames = fieldnames)

def write_matrix_csv(matrix, output_file):
    tools.write_dicts_to_csv(matrix.to_rows(), output_file, fieldnames = ['pruned_for'] + matrix.modality_names)
