#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
unit tests for the evalkit module
"""
import unittest
import shutil
import tempfile
import os
import numpy as np
import model as mx
import prune as pr
import synthdata
import evalkit
import tools
from tools import DataError, DimensionError, ConfigError, ModalityUnavailableError

data_config = {
    'modalities': (('A', 1, 0.5), ('B', 2, 0.3)),
    'image_size': 8,
    'patch_size': 4,
    'classes': 4,
    'n_train': 32,
    'n_val': 8,
    'n_test': 16,
    'noise': 0.2,
    'seed': 0,
}
tiny_settings = {
    'dim': 16, 'depth': 2, 'heads': 2, 'num_experts': 4, 'expert_hidden': 16, 'top_k': 2,
    'decoder_depth': 1, 'decoder_dim': 8, 'decoder_heads': 2, 'decoder_hidden': 16,
    'patch_size': 4, 'image_size': 8,
}


def tiny_model(**kwargs):
    settings = dict(tiny_settings)
    settings.update(kwargs)
    return(mx.build_model([('A', 1), ('B', 2)], **settings))


def brute_force_knn(train, train_labels, test, k, num_classes):
    """
    Reference k-NN by full sorting of squared distances; returns predictions and neighbor lists
    """
    predictions = []
    neighbors = []
    for q in test:
        ranked = sorted(range(len(train)), key = lambda i: (float(np.sum((train[i] - q) ** 2)), i))[:k]
        votes = [0] * num_classes
        for i in ranked:
            votes[int(train_labels[i])] += 1
        predictions.append(votes.index(max(votes)))
        neighbors.append(ranked)
    return(predictions, neighbors)


class FakeOptimizer(object):
    def __init__(self, lr):
        self.lr = lr


class TestKnn(unittest.TestCase):
    def test_example(self):
        train = np.array([[0.0], [1.0], [10.0], [11.0], [12.0]])
        result = evalkit.knn_eval(train, [0, 0, 1, 1, 1], np.array([[0.5]]), [1], k = 5)
        self.assertEqual(result.accuracy, 1.0)
        self.assertEqual(result.echo['k'], 5)

    def test_nearest(self):
        train = np.array([[0.0], [1.0], [10.0], [11.0]])
        result = evalkit.knn_eval(train, [0, 0, 1, 1], np.array([[0.2], [10.4]]), [0, 1], k = 1)
        self.assertEqual(result.accuracy, 1.0)
        self.assertTrue(np.array_equal(result.predictions, [0, 1]))

    def test_distance_ties_take_lower_index(self):
        neighbors = evalkit.knn_neighbors(np.array([[1.0], [-1.0], [3.0]]), np.array([[0.0]]), 2)
        self.assertTrue(np.array_equal(neighbors, [[0, 1]]))

    def test_vote_ties_take_lower_class(self):
        predictions, _ = evalkit.knn_predict(np.array([[1.0], [-1.0]]), [2, 1], np.array([[0.0]]), k = 2, num_classes = 3)
        self.assertEqual(predictions[0], 1)

    def test_k_too_large(self):
        with self.assertRaises(DataError):
            evalkit.knn_eval(np.zeros((3, 2)), [0, 1, 0], np.zeros((1, 2)), [0], k = 4)

    def test_empty_split(self):
        with self.assertRaises(DataError):
            evalkit.knn_eval(np.zeros((3, 2)), [0, 1, 0], np.zeros((0, 2)), [], k = 1)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            evalkit.knn_eval(np.zeros((3, 2)), [0, 1, 0], np.zeros((1, 3)), [0], k = 1)

    def test_per_class(self):
        accuracy, per_class = evalkit.accuracy_per_class([0, 0, 1, 1], [0, 1, 1, 1], 3)
        self.assertEqual(accuracy, 0.75)
        self.assertEqual(per_class[0], 0.5)
        self.assertEqual(per_class[1], 1.0)
        self.assertTrue(np.isnan(per_class[2]))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n_train = int(rng.integers(5, 40))
            k = int(rng.integers(1, min(n_train, 9) + 1))
            # small integer coordinates give exact distance ties
            train = rng.integers(-3, 4, size = (n_train, 3)).astype(np.float64)
            test = rng.integers(-3, 4, size = (12, 3)).astype(np.float64)
            train_labels = rng.integers(0, 3, size = n_train)
            test_labels = rng.integers(0, 3, size = 12)
            expected, expected_neighbors = brute_force_knn(train, train_labels, test, k, 3)
            result = evalkit.knn_eval(train, train_labels, test, test_labels, k = k, num_classes = 3)
            self.assertEqual(result.predictions.tolist(), expected)
            self.assertEqual(evalkit.knn_neighbors(train, test, k).tolist(), expected_neighbors)

    def test_shuffled_labels_near_chance(self):
        ds = synthdata.generate(dict(data_config, n_train = 400, n_test = 400))
        train = ds.raw_features('train', 0)
        test = ds.raw_features('test', 0)
        for seed in range(3):
            labels = np.random.default_rng(seed).permutation(ds.labels('train'))
            result = evalkit.knn_eval(train, labels, test, ds.labels('test'), k = 5, num_classes = 4)
            self.assertAlmostEqual(result.accuracy, 0.25, delta = 0.1)


class TestPlateau(unittest.TestCase):
    def test_two_reductions(self):
        opt = FakeOptimizer(1.0)
        scheduler = evalkit.ReduceLROnPlateau(opt, factor = 0.5, patience = 3)
        reduced = [scheduler.step(1.0) for _ in range(7)]
        self.assertEqual(reduced, [False, False, False, True, False, False, True])
        self.assertEqual(opt.lr, 0.25)
        self.assertEqual(scheduler.reductions, 2)

    def test_improvement_resets(self):
        opt = FakeOptimizer(1.0)
        scheduler = evalkit.ReduceLROnPlateau(opt, factor = 0.5, patience = 2)
        for loss in (1.0, 1.0, 0.9, 0.95, 0.8, 0.85):
            scheduler.step(loss)
        self.assertEqual(opt.lr, 1.0)


class TestSpecializationMatrix(unittest.TestCase):
    def test_means(self):
        matrix = evalkit.SpecializationMatrix([[0.9, 0.5], [0.3, 0.7]], ['A', 'B'])
        self.assertAlmostEqual(matrix.diagonal_mean(), 0.8)
        self.assertAlmostEqual(matrix.off_diagonal_mean(), 0.4)
        self.assertAlmostEqual(matrix.diagonal_advantage(), 0.4)
        rows = matrix.to_rows()
        self.assertEqual(rows[1]['pruned_for'], 'B')
        self.assertEqual(rows[1]['A'], '0.3')


class TestSweepHelpers(unittest.TestCase):
    def test_expert_size_grid(self):
        self.assertEqual(evalkit.expert_size_grid(8, 128, 2), [(4, 256, 1), (8, 128, 2), (16, 64, 4)])

    def test_unknown_sweep(self):
        with self.assertRaises(ConfigError):
            evalkit.sweep('width', {'model': {}, 'pretrain': {}}, None)

    def test_mean_accuracy(self):
        rows = [evalkit.sweep_row('topk', 'k=1', 1, '', 'A', 0.5, 0, 10),
            evalkit.sweep_row('topk', 'k=1', 1, '', 'B', 0.75, 0, 10),
            evalkit.sweep_row('topk', 'k=2', 2, '', 'A', 1.0, 0, 12)]
        self.assertEqual(evalkit.mean_accuracy(rows, 'k=1'), 0.625)
        self.assertTrue(np.isnan(evalkit.mean_accuracy(rows, 'k=3')))


class TestModelProbes(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = synthdata.normalize_dataset(synthdata.generate(data_config))
        cls.net = tiny_model()

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_extract_features(self):
        features = evalkit.extract_features(self.net, self.dataset, 'test', [0, 1], batch_size = 5)
        self.assertEqual(features.shape, (16, 16))

    def test_knn_probe(self):
        result = evalkit.knn_probe(self.net, self.dataset, [1], k = 3, echo = {'checkpoint': 'fresh'})
        self.assertTrue(0.0 <= result.accuracy <= 1.0)
        self.assertEqual(result.echo['modalities'], ['B'])
        self.assertEqual(result.echo['checkpoint'], 'fresh')
        self.assertEqual(len(result.per_class), 4)

    def test_pruned_model_same_neighbors(self):
        pruned = pr.prune(self.net, pr.PruneSpec([0], 2))
        full_train = evalkit.extract_features(self.net, self.dataset, 'train', [0])
        full_test = evalkit.extract_features(self.net, self.dataset, 'test', [0])
        pruned_train = evalkit.extract_features(pruned, self.dataset, 'train', [0])
        pruned_test = evalkit.extract_features(pruned, self.dataset, 'test', [0])
        self.assertLessEqual(np.max(np.abs(full_test - pruned_test)), 1e-9)
        self.assertTrue(np.array_equal(evalkit.knn_neighbors(full_train, full_test, 5), evalkit.knn_neighbors(pruned_train, pruned_test, 5)))
        full = evalkit.knn_probe(self.net, self.dataset, [0], k = 5)
        same = evalkit.knn_probe(pruned, self.dataset, [0], k = 5)
        self.assertTrue(np.array_equal(full.predictions, same.predictions))

    def test_knn_probe_pruned_away(self):
        pruned = pr.prune(self.net, pr.PruneSpec([0], 2))
        with self.assertRaises(ModalityUnavailableError):
            evalkit.knn_probe(pruned, self.dataset, [1], k = 3)

    def test_finetune_frozen(self):
        result = evalkit.finetune(self.net, self.dataset, {'epochs': 3, 'frozen': True, 'batch_size': 8, 'lr': 1e-2}, modality_ids = [0])
        self.assertTrue(0.0 <= result.accuracy <= 1.0)
        self.assertEqual(result.echo['modalities'], ['A'])
        self.assertTrue(0 <= result.echo['best_epoch'] <= 3)
        self.assertEqual(len(result.predictions), 16)

    def test_finetune_leaves_model_unchanged(self):
        before = [p.data.copy() for p in self.net.parameters()]
        evalkit.finetune(self.net, self.dataset, {'epochs': 1, 'batch_size': 16})
        for a, p in zip(before, self.net.parameters()):
            self.assertTrue(np.array_equal(a, p.data))

    def test_finetune_unknown_setting(self):
        with self.assertRaises(ConfigError):
            evalkit.finetune(self.net, self.dataset, {'rounds': 2})

    def test_few_shot(self):
        result = evalkit.few_shot_eval(self.net, self.dataset, 2, seed = 1, config = {'epochs': 2, 'frozen': True})
        self.assertEqual(result.echo['k_shot'], 2)
        self.assertEqual(result.echo['subset_seed'], 1)

    def test_specialization_matrix(self):
        matrix = evalkit.specialization_matrix(self.net, self.dataset, 2, knn_k = 3)
        self.assertEqual(matrix.values.shape, (2, 2))
        self.assertEqual(matrix.modality_names, ['A', 'B'])
        self.assertTrue(np.all((matrix.values >= 0.0) & (matrix.values <= 1.0)))
        self.assertEqual(list(matrix.experts.keys()), [('A', 'A'), ('A', 'B'), ('B', 'A'), ('B', 'B')])
        for l in range(2):
            self.assertEqual(matrix.experts[('A', 'A')][l], mx.route(self.net, l, 0).selected)
            self.assertEqual(matrix.experts[('B', 'B')][l], mx.route(self.net, l, 1).selected)
            self.assertTrue(set(matrix.experts[('A', 'B')][l]) <= set(matrix.experts[('A', 'A')][l]))

    def test_write_probe_csv(self):
        results = [evalkit.knn_probe(self.net, self.dataset, [j], k = 3, echo = {'seed': 0}) for j in (0, 1)]
        path = os.path.join(self.tmpdir, 'probe.csv')
        evalkit.write_probe_csv(results, path)
        rows = tools.read_csv_dicts(path)
        self.assertEqual(len(rows), 2)
        self.assertEqual(list(rows[0].keys()), ['accuracy', 'per_class', 'modalities', 'seed', 'k'])
        self.assertEqual(rows[1]['modalities'], 'B')


class TestSweep(unittest.TestCase):
    def test_topk_rows(self):
        dataset = synthdata.normalize_dataset(synthdata.generate(data_config))
        settings = {
            'model': tiny_settings,
            'pretrain': {'steps': 2, 'batch_size': 4, 'eval_every': 0},
            'seeds': [0],
            'knn_k': 3,
            'k_values': [1, 2],
        }
        rows = evalkit.sweep('topk', settings, dataset)
        self.assertEqual([(r['cell_id'], r['modality']) for r in rows], [('k=1', 'A'), ('k=1', 'B'), ('k=2', 'A'), ('k=2', 'B')])
        self.assertEqual(list(rows[0].keys()), evalkit.SWEEP_FIELDS)
        self.assertLess(rows[0]['params_count'], rows[2]['params_count'])
        tmpdir = tempfile.mkdtemp()
        try:
            path = os.path.join(tmpdir, 'sweep.csv')
            evalkit.write_sweep_csv(rows, path)
            self.assertEqual(len(tools.read_csv_dicts(path)), 4)
        finally:
            shutil.rmtree(tmpdir)


if __name__ == "__main__":
    unittest.main()
