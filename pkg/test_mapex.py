#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
unit tests for the mapex command line entry point
"""
import unittest
import os
import shutil
import tempfile
import numpy as np
import mapex
import config
import pretrain
import prune as pr
import synthdata
import tools
from tools import ConfigError

scriptdir = os.path.dirname(os.path.realpath(__file__))
fixture_dir = os.path.join(scriptdir, "fixtures")
run_conf = os.path.join(fixture_dir, "run.conf")


def run(command, out, *overrides):
    argv = [command, '--config', run_conf, '--out', out] + list(overrides)
    return(mapex.main(argv))


class TestUsage(unittest.TestCase):
    def test_no_command(self):
        self.assertEqual(mapex.main([]), 2)

    def test_unknown_command(self):
        self.assertEqual(mapex.main(['train']), 2)

    def test_parse(self):
        command, config_file, overrides = mapex.parse(['knn', '--config', 'run.conf', '--knn-k', '3'])
        self.assertEqual((command, config_file, overrides), ('knn', 'run.conf', ['--knn-k', '3']))


class TestErrors(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_unknown_key(self):
        self.assertEqual(run('generate', self.tmpdir, '--temperature', '3'), 1)

    def test_missing_checkpoint(self):
        out = os.path.join(self.tmpdir, 'knn')
        self.assertEqual(run('knn', out), 1)
        summary = tools.load_json(os.path.join(out, 'summary.json'))
        self.assertEqual(summary['command'], 'knn')

    def test_unreadable_checkpoint(self):
        path = os.path.join(self.tmpdir, 'bad.mpx')
        with open(path, 'w') as f:
            f.write('not a checkpoint\n')
        self.assertEqual(run('prune', os.path.join(self.tmpdir, 'prune'), '--checkpoint', path), 1)

    def test_load_model_needs_checkpoint(self):
        with self.assertRaises(ConfigError) as ctx:
            mapex.load_model(config.parse_config(run_conf))
        self.assertEqual(ctx.exception.key, 'checkpoint')


class TestCommands(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmpdir = tempfile.mkdtemp()
        cls.pretrain_out = os.path.join(cls.tmpdir, 'pretrain')
        cls.pretrain_code = run('pretrain', cls.pretrain_out)
        cls.checkpoint = os.path.join(cls.pretrain_out, 'model.mpx')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmpdir)

    def out(self, name):
        return(os.path.join(self.tmpdir, name))

    def test_generate(self):
        out = self.out('generate')
        self.assertEqual(run('generate', out), 0)
        self.assertTrue(os.path.isfile(os.path.join(out, 'data', 'manifest.txt')))
        self.assertTrue(os.path.isfile(os.path.join(out, 'config.echo.txt')))
        self.assertTrue(os.path.isfile(os.path.join(out, 'mapex.generate.log')))
        with open(os.path.join(out, 'mapex.generate.log')) as f:
            self.assertIn('generate: modalities=2', f.read())
        summary = tools.load_json(os.path.join(out, 'summary.json'))['summary']
        self.assertEqual(summary['n_train'], 32)
        self.assertIn('raw_knn_A', summary)
        dataset = synthdata.import_dataset(os.path.join(out, 'data'))
        self.assertEqual(dataset.size('test'), 16)

    def test_pretrain(self):
        self.assertEqual(self.pretrain_code, 0)
        for name in ('model.mpx', 'metrics.csv', 'recon.csv', 'val.csv', 'summary.json'):
            self.assertTrue(os.path.isfile(os.path.join(self.pretrain_out, name)), name)
        summary = tools.load_json(os.path.join(self.pretrain_out, 'summary.json'))['summary']
        self.assertIn('final_l_rec', summary)
        self.assertEqual(len(tools.read_csv_dicts(os.path.join(self.pretrain_out, 'recon.csv'))), 3)

    def test_pretrain_reproducible(self):
        out = self.out('pretrain_again')
        self.assertEqual(run('pretrain', out), 0)
        for name in ('metrics.csv', 'recon.csv', 'val.csv'):
            self.assertEqual(tools.md5_file(os.path.join(out, name)), tools.md5_file(os.path.join(self.pretrain_out, name)))

    def test_prune_and_probe(self):
        out = self.out('prune')
        self.assertEqual(run('prune', out, '--checkpoint', self.checkpoint), 0)
        pruned_path = os.path.join(out, 'pruned.mpx')
        self.assertTrue(os.path.isfile(pruned_path))
        summary = tools.load_json(os.path.join(out, 'summary.json'))['summary']
        self.assertEqual(summary['spec'], 'modalities=0;k=2')
        self.assertLess(summary['params_after'], summary['params_before'])

        probe_out = self.out('knn_pruned')
        self.assertEqual(run('knn', probe_out, '--checkpoint', pruned_path), 0)
        rows = tools.read_csv_dicts(os.path.join(probe_out, 'probe.csv'))
        self.assertEqual([row['modalities'] for row in rows], ['A'])
        self.assertEqual(rows[0]['checkpoint'], 'pruned.mpx')

        self.assertEqual(run('knn', self.out('knn_pruned_b'), '--checkpoint', pruned_path, '--knn-modalities', '1'), 1)

    def test_knn_full(self):
        out = self.out('knn')
        self.assertEqual(run('knn', out, '--checkpoint', self.checkpoint), 0)
        rows = tools.read_csv_dicts(os.path.join(out, 'probe.csv'))
        self.assertEqual([row['modalities'] for row in rows], ['A', 'B'])
        for row in rows:
            self.assertTrue(0.0 <= float(row['accuracy']) <= 1.0)

    def test_finetune(self):
        out = self.out('finetune')
        self.assertEqual(run('finetune', out, '--checkpoint', self.checkpoint, '--ft-frozen', 'true'), 0)
        rows = tools.read_csv_dicts(os.path.join(out, 'probe.csv'))
        self.assertEqual(rows[0]['frozen'], 'True')

    def test_fewshot(self):
        out = self.out('fewshot')
        self.assertEqual(run('fewshot', out, '--checkpoint', self.checkpoint, '--k-shots', '1,2'), 0)
        rows = tools.read_csv_dicts(os.path.join(out, 'fewshot.csv'))
        self.assertEqual([row['k_shot'] for row in rows], ['1', '2'])

    def test_sweep_topk(self):
        out = self.out('sweep')
        self.assertEqual(run('sweep', out, '--sweep', 'topk', '--k-values', '1,2', '--steps', '1'), 0)
        rows = tools.read_csv_dicts(os.path.join(out, 'sweep_topk.csv'))
        self.assertEqual(len(rows), 4)

    def test_sweep_specialization(self):
        out = self.out('specialization')
        self.assertEqual(run('sweep', out, '--sweep', 'specialization', '--checkpoint', self.checkpoint), 0)
        rows = tools.read_csv_dicts(os.path.join(out, 'specialization.csv'))
        self.assertEqual([row['pruned_for'] for row in rows], ['A', 'B'])

    def test_verify(self):
        out = self.out('verify')
        self.assertEqual(run('verify', out, '--checkpoint', self.checkpoint), 0)
        summary = tools.load_json(os.path.join(out, 'summary.json'))['summary']
        self.assertEqual(summary['status'], 'PASS')
        self.assertEqual(summary['load_balance_dev'], 0.0)


class TestVerifyHelpers(unittest.TestCase):
    def test_load_balance(self):
        self.assertEqual(mapex.verify_load_balance(), 0.0)

    def test_gradients(self):
        err = mapex.verify_gradients(seed = 0)
        self.assertLess(err, 1e-4)
        # a larger floor can only shrink the relative error of the same sampled coordinates
        self.assertLessEqual(mapex.verify_gradients(seed = 0, floor = 1.0), err)

    def test_random_specs(self):
        specs = mapex.random_prune_specs([0, 1, 2], 4, 5, np.random.default_rng(0))
        self.assertEqual(len(specs), 5)
        self.assertEqual(len(specs[1].modality_ids), 2)
        for spec in specs:
            self.assertTrue(1 <= spec.k <= 4)
            self.assertTrue(set(spec.modality_ids) <= {0, 1, 2})


if __name__ == "__main__":
    unittest.main()
