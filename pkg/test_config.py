#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
unit tests for the config module
"""
import unittest
import os
import shutil
import tempfile
import config
import model as mx
import synthdata
from tools import ConfigError

scriptdir = os.path.dirname(os.path.realpath(__file__))
fixture_dir = os.path.join(scriptdir, "fixtures")
run_conf = os.path.join(fixture_dir, "run.conf")


class TestDefaults(unittest.TestCase):
    def test_defaults_only(self):
        cfg = config.parse_config()
        self.assertEqual(list(cfg.keys()), list(config.DEFAULTS.keys()))
        self.assertEqual(cfg['top_k'], 2)
        self.assertEqual(cfg['routing'], 'modality')

    def test_default_modalities_parse(self):
        cfg = config.parse_config()
        self.assertEqual(synthdata.parse_modalities(cfg['modalities']), synthdata.default_modalities)


class TestParseFile(unittest.TestCase):
    def test_values_and_types(self):
        cfg = config.parse_config(run_conf)
        self.assertEqual(cfg['seed'], 1)
        self.assertEqual(cfg['dim'], 16)
        self.assertEqual(cfg['alpha'], 0.01)
        self.assertIsInstance(cfg['noise'], float)
        self.assertEqual(cfg['prune_modalities'], [0])
        self.assertEqual(cfg['k_shots'], [2])
        self.assertEqual(cfg['modalities'], 'A:1:0.6,B:2:0.3')

    def test_missing_file(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config(os.path.join(fixture_dir, 'nothere.conf'))
        self.assertEqual(ctx.exception.key, 'config')

    def test_bad_line(self):
        tmpdir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmpdir, 'bad.conf')
            with open(path, 'w') as f:
                f.write('dim 16\n')
            with self.assertRaises(ConfigError):
                config.parse_config(path)
        finally:
            shutil.rmtree(tmpdir)


class TestOverrides(unittest.TestCase):
    def test_override_beats_file(self):
        cfg = config.parse_config(run_conf, ['--alpha', '0.5', '--top-k', '1'])
        self.assertEqual(cfg['alpha'], 0.5)
        self.assertEqual(cfg['top_k'], 1)
        self.assertEqual(cfg['dim'], 16)

    def test_equals_form(self):
        cfg = config.parse_config(None, ['--routing=deterministic', '--shared-expert', 'true'])
        self.assertEqual(cfg['routing'], 'deterministic')
        self.assertIs(cfg['shared_expert'], True)

    def test_dict_overrides(self):
        cfg = config.parse_config(None, {'prune_modalities': [0, 2], 'live_routing': True, 'lr': 0.01})
        self.assertEqual(cfg['prune_modalities'], [0, 2])
        self.assertIs(cfg['live_routing'], True)
        self.assertEqual(cfg['lr'], 0.01)

    def test_list_brackets(self):
        cfg = config.parse_config(None, ['--seeds', '[0, 1, 2]'])
        self.assertEqual(cfg['seeds'], [0, 1, 2])

    def test_int_accepted_for_float(self):
        cfg = config.parse_config(None, ['--lr', '1'])
        self.assertEqual(cfg['lr'], 1.0)
        self.assertIsInstance(cfg['lr'], float)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config(None, ['--temperature', '2'])
        self.assertEqual(ctx.exception.key, 'temperature')

    def test_bad_int(self):
        with self.assertRaises(ConfigError) as ctx:
            config.parse_config(None, ['--depth', '2.5'])
        self.assertEqual(ctx.exception.key, 'depth')

    def test_bad_bool(self):
        with self.assertRaises(ConfigError):
            config.parse_config(None, ['--ft-frozen', 'maybe'])

    def test_bad_list(self):
        with self.assertRaises(ConfigError):
            config.parse_config(None, ['--seeds', '0,x'])

    def test_missing_value(self):
        with self.assertRaises(ConfigError):
            config.parse_config(None, ['--alpha'])

    def test_positional_token(self):
        with self.assertRaises(ConfigError):
            config.parse_config(None, ['alpha', '0.1'])


class TestEcho(unittest.TestCase):
    def test_sorted_lines(self):
        text = config.echo_config(config.parse_config(run_conf))
        keys = [line.split(' = ')[0] for line in text.strip().split('\n')]
        self.assertEqual(keys, sorted(config.DEFAULTS.keys()))
        self.assertIn('alpha = 0.01\n', text)
        self.assertIn('shared_expert = false\n', text)
        self.assertIn('prune_modalities = 0\n', text)

    def test_echo_parses_back(self):
        cfg = config.parse_config(run_conf, ['--seeds', '0,1'])
        tmpdir = tempfile.mkdtemp()
        try:
            path = config.write_echo(cfg, tmpdir)
            self.assertEqual(config.parse_config(path), cfg)
        finally:
            shutil.rmtree(tmpdir)


class TestBuilders(unittest.TestCase):
    def setUp(self):
        self.cfg = config.parse_config(run_conf)

    def test_data_config(self):
        dataset = synthdata.generate(config.data_config(self.cfg))
        self.assertEqual([s.name for s in dataset.modalities], ['A', 'B'])
        self.assertEqual(dataset.size('train'), 32)

    def test_model_config(self):
        dataset = synthdata.generate(config.data_config(self.cfg))
        model_config = config.model_config(self.cfg, dataset)
        self.assertIsInstance(model_config, mx.ModelConfig)
        self.assertEqual(model_config.modalities, [('A', 1), ('B', 2)])
        self.assertEqual(model_config.num_patches, 4)
        self.assertEqual(model_config.seed, 1)

    def test_pretrain_config(self):
        settings = config.pretrain_config(self.cfg)
        self.assertEqual(settings['steps'], 3)
        self.assertEqual(settings['seed'], 1)

    def test_prune_spec(self):
        spec = config.prune_spec(config.parse_config(run_conf, ['--prune-modalities', '1,0', '--prune-k', '1']))
        self.assertEqual(spec.to_text(), 'modalities=0,1;k=1')

    def test_finetune_config(self):
        settings = config.finetune_config(self.cfg)
        self.assertEqual(settings['epochs'], 2)
        self.assertIs(settings['frozen'], False)

    def test_sweep_kind(self):
        self.assertEqual(config.check_sweep_kind(config.parse_config(None, ['--sweep', 'specialization'])), 'specialization')
        with self.assertRaises(ConfigError) as ctx:
            config.check_sweep_kind(config.parse_config(None, ['--sweep', 'width']))
        self.assertEqual(ctx.exception.key, 'sweep')


if __name__ == "__main__":
    unittest.main()
