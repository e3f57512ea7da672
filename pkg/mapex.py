#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Command line entry point

Usage::

    mapex.py <command> [--config <file>] [--key value ...] [--out <dir>]

Commands: generate, pretrain, prune, knn, finetune, sweep, fewshot, verify.
Every command writes its artifacts, a ``config.echo.txt``, a ``summary.json`` and a ``mapex.<command>.log`` under the
output directory, and prints a one-line summary.
"""
import os
import sys
import logging
import argparse
from collections import OrderedDict

import numpy as np

import log
logger = log.log_setup(config_yaml = log.default_config_yaml, logger_name = "mapex")
logger.debug("loading mapex module")

import autodiff as ad
import synthdata
import model as mx
import pretrain
import prune as pr
import evalkit
import checkpoint
import config
from classes import RunRecord
from tools import MapexError, ConfigError

# ~~~~ GLOBALS ~~~~~~ #
COMMANDS = ('generate', 'pretrain', 'prune', 'knn', 'finetune', 'sweep', 'fewshot', 'verify')
MODULE_LOGGERS = ('mapex', 'autodiff', 'synthdata', 'model', 'pretrain', 'prune', 'evalkit', 'config', 'checkpoint', 'tools', 'classes')
USAGE = 'usage: mapex.py {{{0}}} [--config FILE] [--key value ...] [--out DIR]'.format('|'.join(COMMANDS))

verify_model_settings = {
    'dim': 16, 'depth': 2, 'heads': 2, 'num_experts': 4, 'expert_hidden': 16, 'top_k': 2,
    'decoder_depth': 1, 'decoder_dim': 8, 'decoder_heads': 2, 'decoder_hidden': 16,
    'patch_size': 4, 'image_size': 8,
}
"""
Depth-2, D=16 architecture used by the gradient oracle
"""
grad_check_floor = 1e-3
"""
Absolute floor of the gradient oracle's relative-error denominator. ``autodiff.grad_check`` defaults to 1e-8, but central
differences at eps=1e-6 carry round-off near 1e-10, which that floor turns into relative errors near 1e-2 on coordinates
whose gradient is close to zero
"""
grad_check_coords = 4
"""
Coordinates sampled per parameter tensor by the gradient oracle; every tensor of the model is visited
"""


# ~~~~ RUN SETUP ~~~~~~ #
def add_run_log(output_dir, command):
    """
    Send every module logger to ``<out>/mapex.<command>.log``; returns the handler
    """
    handler = log.create_main_filehandler(log_file = os.path.join(output_dir, 'mapex.{0}.log'.format(command)), name = 'run')
    for name in MODULE_LOGGERS:
        module_logger = logging.getLogger(name)
        log.add_handlers(module_logger, handler)
        log.add_missing_console_handler(module_logger, level = logging.INFO)
    return(handler)

def remove_run_log(handler):
    for name in MODULE_LOGGERS:
        log.remove_handlers(logging.getLogger(name), [handler])
    handler.close()

def load_dataset(cfg, normalized = True):
    """
    Import ``data_dir`` when set, otherwise generate the synthetic dataset; normalize with training statistics unless
    the imported dataset is already normalized
    """
    if cfg['data_dir']:
        dataset = synthdata.import_dataset(cfg['data_dir'])
    else:
        dataset = synthdata.generate(config.data_config(cfg))
    if normalized and dataset.stats is None:
        dataset = synthdata.normalize_dataset(dataset)
    return(dataset)

def load_model(cfg):
    if not cfg['checkpoint']:
        raise ConfigError('a checkpoint path is required', key = 'checkpoint')
    return(checkpoint.load_checkpoint(cfg['checkpoint']))

def checkpoint_id(cfg):
    return(os.path.basename(cfg['checkpoint']) if cfg['checkpoint'] else 'fresh')


# ~~~~ COMMANDS ~~~~~~ #
def run_generate(cfg, run):
    dataset = load_dataset(cfg, normalized = False)
    data_dir = run.path('data')
    synthdata.export_dataset(dataset, data_dir)
    run.set_dir('data', data_dir)
    stats = synthdata.compute_stats(dataset)
    run.summary['modalities'] = len(dataset.modalities)
    run.summary['n_train'] = dataset.size('train')
    for spec in dataset.modalities:
        run.summary['raw_knn_' + spec.name] = round(evalkit.raw_pixel_knn(dataset, spec.modality_id, k = cfg['knn_k']).accuracy, 4)
    logger.debug('channel means {0}'.format({j: np.round(m, 3).tolist() for j, m in stats.mean.items()}))

def run_pretrain(cfg, run):
    dataset = load_dataset(cfg)
    net = mx.MapexModel(config.model_config(cfg, dataset))
    net, history = pretrain.pretrain(net, dataset, config.pretrain_config(cfg))
    for name, path in history.write(run.output_dir).items():
        run.set_file(name, path)
    run.set_file('checkpoint', checkpoint.save_checkpoint(net, run.path('model' + checkpoint.EXTENSION)))
    if history.steps:
        run.summary['final_l_rec'] = round(history.steps[-1]['l_rec'], 6)
        deviation = np.max(np.abs(history.final_utilization() - 1.0 / net.config.num_experts)) if net.config.depth else 0.0
        run.summary['final_max_u_dev'] = round(float(deviation), 6)
    if history.validation:
        run.summary['val_l_rec_start'] = round(history.validation[0]['l_rec'], 6)
        run.summary['val_l_rec_end'] = round(history.validation[-1]['l_rec'], 6)
    run.summary['params'] = pr.param_count(net)

def run_prune(cfg, run):
    net = load_model(cfg)
    spec = config.prune_spec(cfg)
    pruned = pr.prune(net, spec, live = cfg['live_routing'])
    run.set_file('checkpoint', checkpoint.save_checkpoint(pruned, run.path('pruned' + checkpoint.EXTENSION)))
    run.summary['spec'] = spec.to_text()
    run.summary['experts_per_layer'] = ','.join(str(n) for n in pr.expert_set_sizes(pruned))
    run.summary['params_before'] = pr.param_count(net)
    run.summary['params_after'] = pr.param_count(pruned)

def run_knn(cfg, run):
    net = load_model(cfg)
    dataset = load_dataset(cfg)
    echo = OrderedDict([('checkpoint', checkpoint_id(cfg)), ('seed', cfg['seed'])])
    if cfg['knn_modalities']:
        probes = [sorted(cfg['knn_modalities'])]
    else:
        probes = [[j] for j in net.modality_ids]
    results = [evalkit.knn_probe(net, dataset, ids, k = cfg['knn_k'], echo = echo) for ids in probes]
    path = run.path('probe.csv')
    evalkit.write_probe_csv(results, path)
    run.set_file('probe', path)
    for ids, result in zip(probes, results):
        run.summary['acc_' + '+'.join(net.modality_name(j) for j in ids)] = round(result.accuracy, 4)

def run_finetune(cfg, run):
    net = load_model(cfg)
    dataset = load_dataset(cfg)
    ids = sorted(cfg['knn_modalities']) if cfg['knn_modalities'] else net.modality_ids
    result = evalkit.finetune(net, dataset, config.finetune_config(cfg), modality_ids = ids)
    result.echo['checkpoint'] = checkpoint_id(cfg)
    path = run.path('probe.csv')
    evalkit.write_probe_csv([result], path)
    run.set_file('probe', path)
    run.summary['accuracy'] = round(result.accuracy, 4)
    run.summary['best_epoch'] = result.echo['best_epoch']

def run_fewshot(cfg, run):
    net = load_model(cfg)
    dataset = load_dataset(cfg)
    ids = sorted(cfg['knn_modalities']) if cfg['knn_modalities'] else net.modality_ids
    results = []
    for k_shot in cfg['k_shots']:
        result = evalkit.few_shot_eval(net, dataset, k_shot, cfg['seed'], config.finetune_config(cfg), modality_ids = ids)
        result.echo['checkpoint'] = checkpoint_id(cfg)
        results.append(result)
        run.summary['acc_{0}shot'.format(k_shot)] = round(result.accuracy, 4)
    path = run.path('fewshot.csv')
    evalkit.write_probe_csv(results, path)
    run.set_file('fewshot', path)

def run_sweep(cfg, run):
    kind = config.check_sweep_kind(cfg)
    dataset = load_dataset(cfg)
    if kind == 'specialization':
        if cfg['checkpoint']:
            net = load_model(cfg)
        else:
            net = mx.MapexModel(config.model_config(cfg, dataset))
            net, _ = pretrain.pretrain(net, dataset, config.pretrain_config(cfg))
        matrix = evalkit.specialization_matrix(net, dataset, cfg['prune_k'], knn_k = cfg['knn_k'])
        path = run.path('specialization.csv')
        evalkit.write_matrix_csv(matrix, path)
        run.set_file('specialization', path)
        run.summary['diagonal_advantage'] = round(matrix.diagonal_advantage(), 4)
        return
    rows = evalkit.sweep(kind, config.sweep_settings(cfg), dataset)
    path = run.path('sweep_{0}.csv'.format(kind))
    evalkit.write_sweep_csv(rows, path)
    run.set_file('sweep', path)
    run.summary['rows'] = len(rows)
    for cell in OrderedDict((row['cell_id'], None) for row in rows):
        run.summary['mean_' + cell] = round(evalkit.mean_accuracy(rows, cell), 4)


# ~~~~ VERIFY ~~~~~~ #
def verify_load_balance():
    """
    Reference values of the load-balancing loss; returns the largest absolute deviation
    """
    cases = [
        ([0.25, 0.25, 0.25, 0.25], 0.0),
        ([1.0, 0.0, 0.0, 0.0], 3.0 / 16.0),
        ([0.5, 0.5, 0.0, 0.0], 0.0625),
    ]
    worst = 0.0
    for u, expected in cases:
        value = pretrain.load_balance_loss([ad.Tensor(u)]).item()
        worst = max(worst, abs(value - expected))
    return(worst)

def gradient_probe_model(seed, routing = 'modality'):
    """
    Depth-2, D=16 model with two modalities, a seeded batch and a fixed mask plan for gradient checks
    """
    net = mx.MapexModel(mx.ModelConfig(modalities = [('A', 1), ('B', 2)], routing = routing, seed = seed, **verify_model_settings))
    rng = np.random.default_rng(seed)
    for layer in net.moe_layers():
        if layer.router.weight is not None:
            layer.router.weight.data[...] = rng.normal(0.0, 1.0, size = layer.router.weight.shape)
    for token in net.modality_tokens.values():
        token.data[...] = rng.normal(0.0, 1.0, size = token.shape)
    planes = OrderedDict((j, rng.normal(0.0, 1.0, size = (2, net.channels(j), 8, 8))) for j in net.modality_ids)
    plan = pretrain.build_mask_plan(2, net.modality_ids, net.num_patches, 0.75, rng)
    return(net, planes, plan)

def verify_gradients(seed = 0, max_coords = grad_check_coords, floor = grad_check_floor):
    """
    Worst relative error of the analytic gradient of the full pretraining objective
    """
    net, planes, plan = gradient_probe_model(seed)
    def objective():
        loss, _, _ = pretrain.compute_loss(net, planes, plan, alpha = 0.5)
        return(loss.total)
    return(ad.grad_check(objective, net.parameters(), eps = 1e-6, floor = floor, max_coords = max_coords, seed = seed))

def random_prune_specs(modality_ids, num_experts, count, rng):
    """
    ``count`` seeded specs; the second spec always covers two modalities when possible
    """
    specs = []
    for i in range(count):
        size = 2 if (i == 1 and len(modality_ids) > 1) else int(rng.integers(1, len(modality_ids) + 1))
        ids = sorted(rng.choice(modality_ids, size = size, replace = False).tolist())
        specs.append(pr.PruneSpec(ids, int(rng.integers(1, num_experts + 1))))
    return(specs)

def verify_pruning(net, dataset, probes, specs, seed = 0):
    """
    Worst full-vs-pruned feature difference over seeded probes and prune specs, each spec using the model's top-k
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for spec in random_prune_specs(net.modality_ids, net.config.num_experts, specs, rng):
        spec = pr.PruneSpec(spec.modality_ids, net.config.top_k)
        pruned = pr.prune(net, spec)
        for _ in range(probes):
            indices = rng.choice(dataset.size('test'), size = 4, replace = False)
            planes, _ = dataset.batch('test', indices, modality_ids = spec.modality_ids)
            worst = max(worst, pr.verify_equivalence(net, pruned, spec, planes))
    return(worst)

def run_verify(cfg, run):
    failures = []
    eq1 = verify_load_balance()
    run.summary['load_balance_dev'] = eq1
    if eq1 != 0.0:
        failures.append('load balance reference values')
    grad = verify_gradients(seed = cfg['seed'])
    run.summary['grad_rel_err'] = float('{0:.3e}'.format(grad))
    if not grad < cfg['grad_tolerance']:
        failures.append('gradient check')
    dataset = load_dataset(cfg)
    net = load_model(cfg) if cfg['checkpoint'] else mx.MapexModel(config.model_config(cfg, dataset))
    diff = verify_pruning(net, dataset, cfg['verify_probes'], cfg['verify_specs'], seed = cfg['seed'])
    run.summary['prune_max_diff'] = diff
    if not diff <= 1e-9:
        failures.append('pruning equivalence')
    run.summary['status'] = 'FAIL' if failures else 'PASS'
    if failures:
        raise MapexError('verify failed: {0}'.format(', '.join(failures)))


RUNNERS = {
    'generate': run_generate,
    'pretrain': run_pretrain,
    'prune': run_prune,
    'knn': run_knn,
    'finetune': run_finetune,
    'sweep': run_sweep,
    'fewshot': run_fewshot,
    'verify': run_verify,
}


# ~~~~ ENTRY POINT ~~~~~~ #
def parse(argv):
    """
    Split ``argv`` into the command, the config file path and the ``--key value`` overrides
    """
    parser = argparse.ArgumentParser(prog = 'mapex.py', description = 'MAPEX desk-scale pretraining, pruning and evaluation', add_help = False)
    parser.add_argument("command", type = str, help = "one of: {0}".format(', '.join(COMMANDS)))
    parser.add_argument("--config", default = None, type = str, dest = 'config_file', metavar = 'config_file', help = "Flat key = value config file")
    args, overrides = parser.parse_known_args(argv)
    return(args.command, args.config_file, overrides)

def main(argv = None):
    """
    Run one command; returns the exit code (0 success, 1 error, 2 usage)
    """
    if argv is None:
        argv = sys.argv[1:]
    if not argv or argv[0] not in COMMANDS:
        print(USAGE)
        return(2)
    try:
        command, config_file, overrides = parse(argv)
    except SystemExit:
        print(USAGE)
        return(2)
    handler = None
    try:
        cfg = config.parse_config(config_file, overrides)
        run = RunRecord(command, cfg['out'])
        handler = add_run_log(run.output_dir, command)
        run.set_file('config', config.write_echo(cfg, run.output_dir))
        logger.info('running {0} with output directory {1}'.format(command, run.output_dir))
        try:
            RUNNERS[command](cfg, run)
        finally:
            run.write_summary()
        print(run.summary_line())
        return(0)
    except MapexError as e:
        log.log_exception(logger, e)
        print('{0}: error: {1}'.format(argv[0], e))
        return(1)
    finally:
        if handler is not None:
            remove_run_log(handler)


if __name__ == "__main__":
    sys.exit(main())
