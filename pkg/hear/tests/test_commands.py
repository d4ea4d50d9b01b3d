from io import StringIO
from unittest import mock

import torch
from django.core.management import call_command, load_command_class
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from hear.activation import read_scores_csv
from hear.checkpoint import KIND_PRETRAIN, load_encoder, read_checkpoint
from hear.config import RunConfig
from hear.evaluation import METRIC_NAMES, read_results
from hear.training_service import classifier_factory

from .helpers import TempDirMixin, small_corpus

SMALL_MODEL = dict(
    variant='custom', hidden_dim='16', num_layers='2', num_heads='2', codebook_size='16',
    window_len='32', max_time_patches='4',
)


def run(name, *args, **options):
    out, err = StringIO(), StringIO()
    call_command(name, *args, stdout=out, stderr=err, **options)
    return out.getvalue(), err.getvalue()


class DictCommandTests(TempDirMixin, SimpleTestCase):
    def test_lookup(self):
        out, _ = run('dict', lookup='Fp1')
        self.assertEqual(out.strip(), 'Fp1 EEG -0.0806 -0.0291 -0.0413')
        out, _ = run('dict', lookup='EEG FP1-REF')
        self.assertEqual(out.strip(), 'Fp1 EEG -0.0806 -0.0291 -0.0413')
        out, _ = run('dict', lookup='EEG T3-LE')
        self.assertTrue(out.startswith('T3 EEG'))

    def test_lookup_miss_exits_two(self):
        with self.assertRaises(CommandError) as ctx:
            run('dict', lookup='Fpz2')
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('not found', str(ctx.exception))

    def test_summary_line(self):
        out, _ = run('dict')
        self.assertRegex(out, r'^\d+ electrodes in ')

    def test_validate_reports_line_numbers(self):
        path = self.tmp / 'bad.txt'
        path.write_text("C3, 10-10, EEG, 0, 0, 0\nC4, 10-10, EEG, 0, zero, 0\n")
        with self.assertRaises(CommandError) as ctx:
            run('dict', validate=str(path))
        self.assertEqual(ctx.exception.returncode, 2)

        err = StringIO()
        with self.assertRaises(CommandError):
            call_command('dict', validate=str(path), stdout=StringIO(), stderr=err)
        self.assertIn('line 2', err.getvalue())

    def test_validate_ok(self):
        path = self.tmp / 'good.txt'
        path.write_text("C3, 10-10, EEG, -0.05, 0, 0.07\nC4, 10-10, EEG, 0.05, 0, 0.07\n")
        out, _ = run('dict', validate=str(path))
        self.assertTrue(out.strip().endswith(': ok'))

    def test_missing_dictionary_exits_two(self):
        with self.assertRaises(CommandError) as ctx:
            run('dict', dictionary_path=str(self.tmp / 'absent.txt'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_config_file_exits_two(self):
        with self.assertRaises(CommandError) as ctx:
            run('dict', config=str(self.tmp / 'absent.cfg'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unexpected_failure_exits_one(self):
        with mock.patch('hear.management.commands.dict.load_dictionary', side_effect=ValueError('bad tensor')):
            with self.assertLogs('hear.management.base', level='ERROR'):
                with self.assertRaises(CommandError) as ctx:
                    run('dict')
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn('ValueError: bad tensor', str(ctx.exception))


class HelpTests(SimpleTestCase):
    def test_every_config_key_has_a_flag(self):
        for name in ('pretrain', 'finetune', 'eval', 'gen', 'topomap', 'gradcheck', 'dict'):
            with self.subTest(name):
                text = load_command_class('hear', name).create_parser('manage.py', name).format_help()
                for key in RunConfig.keys():
                    self.assertIn(f"--{key.replace('_', '-')}", text)


class PipelineCommandTests(TempDirMixin, SimpleTestCase):
    def test_gen_writes_manifest(self):
        out, _ = run('gen', data_dir=str(self.tmp / 'synth'), samples_per_layout='4', duration='1.0', oracle=True)
        lines = out.strip().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue((self.tmp / 'synth' / 'manifest').exists())
        self.assertTrue(lines[-1].startswith('oracle accuracy '))

    def test_gen_rejects_unknown_layout(self):
        with self.assertRaises(CommandError) as ctx:
            run('gen', data_dir=str(self.tmp / 'synth'), layouts='C3;Nowhere', samples_per_layout='2')
        self.assertEqual(ctx.exception.returncode, 1)

    def test_pretrain_without_steps(self):
        output = self.tmp / 'out'
        out, _ = run('pretrain', steps='0', output_dir=str(output), data_dir=str(self.tmp / 'none'), **SMALL_MODEL)
        self.assertEqual((output / 'pretrain_log.txt').read_text(), '')
        checkpoint = read_checkpoint(output / 'pretrain.ckpt')
        self.assertEqual(checkpoint.kind, KIND_PRETRAIN)
        self.assertEqual(checkpoint.config.hidden_dim, 16)
        self.assertIn('checkpoint ', out)

        classifier = classifier_factory(RunConfig.from_values({'checkpoint': str(output / 'pretrain.ckpt'), 'classes': 3}))(5)
        self.assertEqual(classifier.config.hidden_dim, 16)
        self.assertEqual(classifier.num_classes, 3)
        stored = load_encoder(output / 'pretrain.ckpt').state_dict()
        for name, tensor in classifier.encoder.state_dict().items():
            self.assertTrue(torch.equal(tensor, stored[name]), name)

    def test_pretrain_then_finetune(self):
        small_corpus(self.tmp / 'data', samples_per_layout=10)
        common = dict(data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'), batch_size='4', **SMALL_MODEL)
        out, _ = run('pretrain', steps='3', **common)
        log = (self.tmp / 'out' / 'pretrain_log.txt').read_text().splitlines()
        self.assertEqual(len(log), 3)
        self.assertEqual(out.splitlines()[0], log[-1])

        out, _ = run('finetune', epochs='1', checkpoint=str(self.tmp / 'out' / 'pretrain.ckpt'), **common)
        names = [line.split()[0] for line in out.splitlines()]
        self.assertEqual(names, [*METRIC_NAMES, 'checkpoint'])
        self.assertTrue((self.tmp / 'out' / 'finetune_seed0.ckpt').exists())

    def test_eval_writes_results(self):
        small_corpus(self.tmp / 'data', samples_per_layout=10)
        out, _ = run('eval', data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'), epochs='1',
                     seeds='0,1', batch_size='4', transfer=True, **SMALL_MODEL)
        table = read_results(self.tmp / 'out' / 'results.txt')
        self.assertEqual(set(table['data']), set(METRIC_NAMES))
        self.assertEqual(len(table['data']['balanced_accuracy'].values), 2)
        self.assertIn('first->second balanced_accuracy', out)
        self.assertTrue((self.tmp / 'out' / 'transfer.txt').exists())

    def test_topomap_exports(self):
        small_corpus(self.tmp / 'data', samples_per_layout=10)
        out, _ = run('topomap', data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'), batch_size='4',
                     epochs='2', history=True, **SMALL_MODEL)
        scores = read_scores_csv(self.tmp / 'out' / 'topomap.csv')
        self.assertEqual(len(scores), 6)
        self.assertEqual(min(score for _, score in scores), 0.0)
        self.assertEqual(max(score for _, score in scores), 1.0)
        history = (self.tmp / 'out' / 'topomap_history.csv').read_text().splitlines()
        self.assertEqual(len(history), 3)
        self.assertTrue((self.tmp / 'out' / 'topomap.svg').exists())
        self.assertIn('svg ', out)

    def test_topomap_unknown_signature(self):
        small_corpus(self.tmp / 'data', samples_per_layout=6)
        with self.assertRaises(CommandError) as ctx:
            run('topomap', data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'),
                signature='0000000000000000', **SMALL_MODEL)
        self.assertEqual(ctx.exception.returncode, 2)

    def test_topomap_without_channel_attention(self):
        small_corpus(self.tmp / 'data', samples_per_layout=6)
        with self.assertRaises(CommandError) as ctx:
            run('topomap', data_dir=str(self.tmp / 'data'), output_dir=str(self.tmp / 'out'),
                use_channel_attention='false', **SMALL_MODEL)
        self.assertEqual(ctx.exception.returncode, 2)


@tag('slow')
class GradcheckCommandTests(SimpleTestCase):
    def test_fresh_model_passes(self):
        out, _ = run('gradcheck', seed='0')
        self.assertNotIn('FAIL', out)
        worst = float(out.strip().splitlines()[-1].split()[-1])
        self.assertLess(worst, 1e-4)
