import math
import warnings
from dataclasses import replace

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from hear.checkpoint import read_checkpoint
from hear.config import RunConfig
from hear.container import DatasetContainer
from hear.evaluation import (
    METRIC_NAMES,
    FineTuner,
    SplitSpec,
    balanced_accuracy,
    compute_metrics,
    confusion_matrix,
    evaluate_transfer,
    macro_f1,
    read_results,
    run_protocol,
    split_dataset,
    summarize,
    weighted_f1,
    write_results,
)
from hear.exceptions import EmptyMatrixError, ShapeMismatchError, TooFewSamplesError
from hear.layout_scheduler import SubsetDataset
from hear.model_core import HEARClassifier, finetune_forward
from hear.synthetic_data import bandpower_oracle
from hear.training_service import classifier_factory, finetune_options, open_dataset, run_pretraining

from .helpers import TempDirMixin, shipped_dictionary, small_config, small_corpus


def reference_metrics(counts):
    """Per-class loop over the textbook definitions."""
    counts = np.asarray(counts, dtype=float)
    recalls, f1s, supports = [], [], []
    for k in range(len(counts)):
        tp = counts[k, k]
        support = counts[k].sum()
        predicted = counts[:, k].sum()
        recall = tp / support if support else 0.0
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)
    present = [k for k in range(len(counts)) if supports[k] > 0]
    return (
        sum(recalls[k] for k in present) / len(present),
        sum(f1s[k] for k in present) / len(present),
        sum(f * s for f, s in zip(f1s, supports)) / sum(supports),
    )


class SplitTests(SimpleTestCase):
    def test_sizes(self):
        for n, expected in ((100, (60, 20, 20)), (5, (3, 1, 1)), (7, (4, 1, 2))):
            with self.subTest(n=n):
                parts = split_dataset([str(i) for i in range(n)])
                self.assertEqual(tuple(len(part) for part in parts), expected)

    def test_partition_is_disjoint_and_seeded(self):
        ids = [f"s:{i}" for i in range(40)]
        train, val, test = split_dataset(ids, SplitSpec(seed=3))
        self.assertEqual(sorted(train + val + test), sorted(ids))
        self.assertEqual((train, val, test), split_dataset(ids, SplitSpec(seed=3)))
        self.assertNotEqual(train, split_dataset(ids, SplitSpec(seed=4))[0])

    def test_too_few_samples(self):
        with self.assertRaises(TooFewSamplesError):
            split_dataset(['a', 'b', 'c', 'd'])


class MetricTests(SimpleTestCase):
    def test_worked_example(self):
        cm = [[1, 1], [0, 2]]
        self.assertAlmostEqual(balanced_accuracy(cm), 0.75, places=12)
        self.assertAlmostEqual(macro_f1(cm), 11 / 15, places=12)
        # Both classes have support 2, so the support-weighted mean equals the macro mean.
        self.assertAlmostEqual(weighted_f1(cm), 11 / 15, places=12)

    def test_perfect_diagonal(self):
        metrics = compute_metrics(np.diag([3, 5, 2]))
        self.assertEqual(set(metrics), set(METRIC_NAMES))
        for value in metrics.values():
            self.assertEqual(value, 1.0)

    def test_empty_class_is_excluded(self):
        cm = [[3, 1], [0, 0]]
        self.assertAlmostEqual(balanced_accuracy(cm), 0.75)
        self.assertAlmostEqual(macro_f1(cm), 2 * 0.75 / 1.75)

    def test_no_hits_gives_zero_f1(self):
        self.assertEqual(macro_f1([[0, 2], [3, 0]]), 0.0)

    def test_fuzzed_matrices_match_textbook_loop(self):
        rng = np.random.default_rng(21)
        for case in range(20):
            size = int(rng.integers(2, 6))
            counts = rng.integers(0, 8, size=(size, size))
            counts[0, 0] += 1
            expected = reference_metrics(counts)
            with self.subTest(case=case):
                self.assertAlmostEqual(balanced_accuracy(counts), expected[0], delta=1e-12)
                self.assertAlmostEqual(macro_f1(counts), expected[1], delta=1e-12)
                self.assertAlmostEqual(weighted_f1(counts), expected[2], delta=1e-12)

    def test_row_scaling_keeps_balanced_accuracy(self):
        counts = np.array([[4, 1, 0], [2, 2, 1], [0, 1, 6]])
        scaled = counts * np.array([[3], [1], [5]])
        self.assertAlmostEqual(balanced_accuracy(scaled), balanced_accuracy(counts), places=12)

    def test_balanced_data_weighted_equals_macro(self):
        counts = np.array([[5, 2, 1], [1, 6, 1], [0, 3, 5]])
        self.assertAlmostEqual(weighted_f1(counts), macro_f1(counts), places=12)

    def test_metrics_are_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            counts = rng.integers(0, 5, size=(3, 3)) + np.eye(3, dtype=int)
            for value in compute_metrics(counts).values():
                self.assertGreaterEqual(value, 0.0)
                self.assertLessEqual(value, 1.0)

    def test_empty_matrix(self):
        with self.assertRaises(EmptyMatrixError):
            balanced_accuracy(np.zeros((2, 2)))
        with self.assertRaises(EmptyMatrixError):
            weighted_f1(np.ones((2, 3)))

    def test_confusion_matrix_counts(self):
        cm = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
        np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [1, 0, 1]])
        self.assertEqual(cm.total, 5)
        self.assertEqual(cm.num_classes, 3)


class SummaryTests(TempDirMixin, SimpleTestCase):
    def test_sample_standard_deviation(self):
        summary = summarize([0.6, 0.7, 0.8])
        self.assertAlmostEqual(summary.mean, 0.7)
        self.assertAlmostEqual(summary.std, 0.1)
        self.assertEqual(summarize([0.5, 0.5, 0.5]).std, 0.0)
        self.assertEqual(summarize([0.4]).std, 0.0)

    def test_results_table(self):
        summaries = {'balanced_accuracy': summarize([0.6, 0.7, 0.8]), 'macro_f1': summarize([0.5, 0.5, 0.5])}
        path = write_results(self.tmp / 'out' / 'results.txt', 'synth', summaries)
        lines = path.read_text().splitlines()
        self.assertEqual(lines[0], '# dataset, metric, mean, std, seed_values')
        self.assertEqual(lines[1], 'synth, balanced_accuracy, 0.700000, 0.100000, 0.600000;0.700000;0.800000')
        table = read_results(path)
        self.assertAlmostEqual(table['synth']['macro_f1'].mean, 0.5)
        self.assertEqual(table['synth']['balanced_accuracy'].values, [0.6, 0.7, 0.8])


class FinetuneForwardTests(SimpleTestCase):
    def test_zero_head_gives_zero_logits(self):
        model = HEARClassifier(small_config(), num_classes=3)
        torch.nn.init.zeros_(model.head.weight)
        torch.nn.init.zeros_(model.head.bias)
        logits = finetune_forward(model, torch.randn(5, 4, 2, 32), 0.09 * torch.randn(4, 3))
        self.assertEqual(tuple(logits.shape), (5, 3))
        self.assertTrue(torch.all(logits == 0))

    def test_unseen_layout_runs(self):
        model = HEARClassifier(small_config(), num_classes=2)
        for channels in (2, 7):
            logits = finetune_forward(model, torch.randn(3, channels, 3, 32), 0.09 * torch.randn(channels, 3))
            self.assertEqual(tuple(logits.shape), (3, 2))

    def test_wrong_window_is_rejected(self):
        model = HEARClassifier(small_config(), num_classes=2)
        with self.assertRaises(ShapeMismatchError):
            finetune_forward(model, torch.randn(3, 2, 2, 16), 0.09 * torch.randn(2, 3))


class FineTunerTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        small_corpus(self.tmp, samples_per_layout=10, window_len=32)
        self.dataset = SubsetDataset(DatasetContainer(self.tmp), shipped_dictionary(), window_len=32,
                                     max_time_patches=4)

    def factory(self, seed):
        torch.manual_seed(seed)
        return HEARClassifier(small_config(), num_classes=2)

    def test_fit_records_epochs_and_calls_back(self):
        seen = []
        tuner = FineTuner(self.factory(0), self.dataset, epochs=3, batch_size=4,
                          epoch_callback=lambda epoch, model: seen.append(epoch))
        ids = [record.sample_id for record in self.dataset.index.samples]
        train, val, test = split_dataset(ids)
        history = tuner.fit(self.dataset.index.subset(train), self.dataset.index.subset(val))
        self.assertEqual([record.epoch for record in history], [1, 2, 3])
        self.assertEqual(seen, [1, 2, 3])
        self.assertEqual(tuner.best_score, max(record.val_balanced_accuracy for record in history))

        y_true, y_pred = tuner.predict(self.dataset.index.subset(test))
        self.assertEqual(len(y_true), len(test))
        self.assertTrue(set(y_pred) <= {0, 1})

    def test_fit_raises_no_autograd_warnings(self):
        tuner = FineTuner(self.factory(0), self.dataset, epochs=1, batch_size=4)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            history = tuner.fit(self.dataset.index)
        self.assertTrue(math.isfinite(history[0].train_loss))
        self.assertEqual([str(w.message) for w in caught if 'requires_grad' in str(w.message)], [])

    def test_linear_probe_freezes_encoder(self):
        model = HEARClassifier(small_config(), num_classes=2, linear_probe=True)
        before = {name: p.detach().clone() for name, p in model.encoder.named_parameters()}
        FineTuner(model, self.dataset, epochs=1, batch_size=4).fit(self.dataset.index)
        for name, parameter in model.encoder.named_parameters():
            self.assertTrue(torch.equal(parameter, before[name]), name)

    def test_protocol_is_reproducible(self):
        options = dict(epochs=1, batch_size=4)
        first = run_protocol(self.dataset, self.factory, seeds=(0, 1), **options)
        second = run_protocol(self.dataset, self.factory, seeds=(0, 1), **options)
        self.assertEqual(set(first), set(METRIC_NAMES))
        for name in METRIC_NAMES:
            self.assertEqual(first[name].values, second[name].values)
            self.assertEqual(len(first[name].values), 2)


@tag('slow')
class SyntheticProtocolTests(TempDirMixin, SimpleTestCase):
    def test_planted_task_is_learned(self):
        small_corpus(self.tmp, samples_per_layout=100, window_len=200)
        dataset = SubsetDataset(DatasetContainer(self.tmp), shipped_dictionary(), window_len=200,
                                max_time_patches=4)
        config = small_config(hidden_dim=32, num_heads=4, window_len=200)

        def factory(seed):
            torch.manual_seed(seed)
            return HEARClassifier(config, num_classes=2)

        summaries = run_protocol(dataset, factory, seeds=(0, 1, 2), epochs=15, batch_size=16, learning_rate=1e-3)
        oracle = bandpower_oracle(DatasetContainer(self.tmp), shipped_dictionary())
        self.assertGreaterEqual(summaries['balanced_accuracy'].mean, 0.9)
        self.assertGreaterEqual(summaries['balanced_accuracy'].mean, oracle.accuracy - 0.05)

    def test_pretrained_encoder_learns_planted_task(self):
        small_corpus(self.tmp / 'data', samples_per_layout=100, window_len=200)
        config = RunConfig.from_values(dict(
            data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'), variant='custom', hidden_dim=32,
            num_layers=2, num_heads=4, codebook_size=16, window_len=200, max_time_patches=4, batch_size=16,
            learning_rate=1e-3, steps=40, epochs=15, seeds='0,1,2',
        ))
        pretrained = run_pretraining(config)
        self.assertEqual(len(pretrained.history), 40)

        config = replace(config, checkpoint=str(pretrained.checkpoint_path))
        factory = classifier_factory(config)
        stored = read_checkpoint(pretrained.checkpoint_path).encoder_state()
        for name, tensor in factory(0).encoder.state_dict().items():
            torch.testing.assert_close(tensor, stored[name].to(tensor.dtype), rtol=0, atol=0)

        summaries = run_protocol(open_dataset(config), factory, config.seeds, **finetune_options(config))
        oracle = bandpower_oracle(DatasetContainer(self.tmp / 'data'), shipped_dictionary())
        self.assertGreaterEqual(summaries['balanced_accuracy'].mean, 0.9)
        self.assertGreaterEqual(summaries['balanced_accuracy'].mean, oracle.accuracy - 0.05)

    def test_layout_transfer_beats_chance(self):
        small_corpus(self.tmp, samples_per_layout=100, window_len=200)
        dataset = SubsetDataset(DatasetContainer(self.tmp), shipped_dictionary(), window_len=200,
                                max_time_patches=4)
        config = small_config(hidden_dim=32, num_heads=4, window_len=200)
        signatures = list(dataset.index.groups)
        first = dataset.index.subset(dataset.index.groups[signatures[0]])
        second = dataset.index.subset(dataset.index.groups[signatures[1]])

        def factory(seed):
            torch.manual_seed(seed)
            return HEARClassifier(config, num_classes=2)

        results = evaluate_transfer(dataset, factory, first, second, epochs=15, batch_size=16)
        # three standard errors above chance for the smaller target group
        chance = 0.5 + 3 * math.sqrt(0.25 / min(len(first), len(second)))
        self.assertEqual(set(results), {'first->second', 'second->first'})
        for metrics in results.values():
            self.assertEqual(set(metrics), set(METRIC_NAMES))
            self.assertGreater(metrics['balanced_accuracy'], chance)
