import json
from dataclasses import replace

import numpy as np
import pytest

from core.config_manager import ExperimentConfig, TrainConfig
from core.datapipe import augment_pair
from core.emit import CURVES, EPOCH_COLUMNS, emit_metrics, plot_curves, write_json
from core.errors import ConfigError, EvaluationError, TrainingDivergedError
from core.matrix import table2_matrix
from core.metrics import MiouSummary
from core.synthetic import SyntheticDataset, SyntheticSceneSpec
from core.trainer import (EpochMetrics, Trainer, build_datasets, evaluate_checkpoint, is_better,
                          run_experiment)
from plugins.base_plugin import RegularizerSpec


def metrics(epoch, mean, loss=1.0):
    return EpochMetrics(epoch, 1.0, MiouSummary(mean, 0.0, mean, mean, mean, loss), 0.5, 0.0, 0, 0, seconds=3.0)


def make_trainer(exp):
    train, val = build_datasets(exp.train)
    return Trainer(exp, train, val)


class TestBestEpoch:

    def test_higher_mean_wins(self):
        assert is_better(metrics(2, 0.6), metrics(1, 0.5))
        assert not is_better(metrics(2, 0.4), metrics(1, 0.5))

    def test_tie_prefers_lower_loss(self):
        assert is_better(metrics(2, 0.5, loss=0.8), metrics(1, 0.5, loss=0.9))
        assert not is_better(metrics(2, 0.5, loss=0.9), metrics(1, 0.5, loss=0.9))

    def test_first_epoch_always_best(self):
        assert is_better(metrics(1, 0.0), None)

    def test_seconds_ignored_in_equality(self):
        assert metrics(1, 0.5) == replace(metrics(1, 0.5), seconds=99.0)


class TestTrainer:

    def test_num_classes_from_dataset(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        assert trainer.num_classes == 3
        assert trainer.model.config.num_classes == 3

    def test_poly_schedule_bounds(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        assert trainer.num_batches == 4
        assert trainer.max_iterations == 8

    def test_frozen_groups_leave_parameters(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        for group in trainer.groups:
            group.frozen = True
        before = {n: p.data.copy() for n, p in trainer.model.named_parameters().items()}
        trainer.train_epoch(1)
        for name, p in trainer.model.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_head_lr_ratio(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        trainer.train_epoch(1)
        lrs = trainer.optimizer.last_lrs
        assert lrs['head'] == lrs['backbone'] * 10.0

    def test_epoch_metrics_ranges(self, tiny_experiment):
        m = make_trainer(tiny_experiment).train_epoch(1)
        assert m.epoch == 1 and m.train_loss >= 0 and m.val_loss >= 0
        assert 0.0 <= m.val.worst <= m.val.median <= m.val.best <= 1.0
        assert 0 <= m.best_image < 4 and 0 <= m.worst_image < 4

    def test_epoch_zero_rejected(self, tiny_experiment):
        with pytest.raises(ConfigError):
            make_trainer(tiny_experiment).train_epoch(0)

    def test_none_experiment_never_masks(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        trainer.train_epoch(1)
        assert trainer.model.mask_invocations == 0

    def test_regularized_experiment_masks(self, tiny_experiment):
        exp = replace(tiny_experiment, name='all-chandrop', resnet=RegularizerSpec('channel', 0.2),
                      spp=RegularizerSpec('channel', 0.2), decoder=RegularizerSpec('channel', 0.2))
        trainer = make_trainer(exp)
        trainer.train_epoch(1)
        # 每个 batch：3 个残差块 + spp + decoder
        assert trainer.model.mask_invocations == trainer.num_batches * (3 + 1 + 1)

    def test_scheduled_effective_p(self, tiny_experiment):
        exp = replace(tiny_experiment, name='all-chandrop-scheduled', spp=RegularizerSpec('channel', 0.2),
                      scheduled=True, schedule_epochs=30)
        trainer = make_trainer(exp)
        assert trainer.effective_p(10) == pytest.approx(0.2 * 10 / 30)
        assert trainer.effective_p(10) == pytest.approx(0.0667, abs=1e-4)
        assert trainer.effective_p(30) == pytest.approx(0.2)

    def test_diverged_loss(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        trainer.model.named_parameters()['head.decoder.classifier.bias'].data[0] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            trainer.train_epoch(1)
        assert info.value.batch_index == 0
        assert info.value.exit_code == 3

    def test_stop_request(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        calls = []

        def progress(message, batch, total):
            calls.append(batch)
            trainer.stop_requested = True

        trainer.train_epoch(1, progress)
        assert calls == [0]

    def test_state_round_trip(self, tiny_experiment):
        trainer = make_trainer(tiny_experiment)
        trainer.train_epoch(1)
        other = make_trainer(tiny_experiment)
        other.load_state_tensors(trainer.state_tensors())
        sample = augment_pair(trainer.val_data[0], trainer.eval_augment)
        np.testing.assert_array_equal(trainer.predict_logits([sample]), other.predict_logits([sample]))
        assert other.optimizer.velocity.keys() == trainer.optimizer.velocity.keys()


class TestRunExperiment:

    def test_outputs(self, tiny_experiment, tmp_path):
        result = run_experiment(tiny_experiment, tmp_path)
        assert len(result.history) == 2
        assert result.best in result.history
        lines = (tmp_path / 'metrics.csv').read_text().splitlines()
        assert lines[0] == ','.join(EPOCH_COLUMNS)
        assert len(lines) == 3
        summary = json.loads((tmp_path / 'summary.json').read_text())
        assert summary['completed'] is True and summary['experiment'] == 'tiny'
        assert 'seconds' not in summary['epochs'][0]
        assert (tmp_path / 'checkpoint' / 'manifest.json').exists()
        assert (tmp_path / 'probes' / '0000_pred.png').exists()
        assert (tmp_path / 'probes' / '0001_truth.png').exists()
        for name in ('train_loss.png', 'val_loss.png', 'train_mious.png', 'val_mious.png'):
            assert (tmp_path / name).exists()
        assert (tmp_path / 'synthetic.json').exists()
        assert json.loads((tmp_path / 'config.json').read_text())['name'] == 'tiny'

    def test_single_epoch_is_best(self, tiny_experiment, tmp_path):
        exp = replace(tiny_experiment, train=replace(tiny_experiment.train, epochs=1))
        assert run_experiment(exp, tmp_path).best.epoch == 1

    def test_deterministic(self, tiny_experiment, tmp_path):
        exp = replace(tiny_experiment, resnet=RegularizerSpec('uout', 0.2),
                      decoder=RegularizerSpec('dropblock', 0.2, block_size=3))
        a = run_experiment(exp, tmp_path / 'a')
        b = run_experiment(exp, tmp_path / 'b')
        assert a.history == b.history
        for name in ('metrics.csv', 'summary.json'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
        assert (tmp_path / 'a' / 'checkpoint' / 'params.bin').read_bytes() == \
            (tmp_path / 'b' / 'checkpoint' / 'params.bin').read_bytes()

    def test_seed_changes_run(self, tiny_experiment, tmp_path):
        a = run_experiment(tiny_experiment, tmp_path / 'a')
        b = run_experiment(tiny_experiment.with_seed(1), tmp_path / 'b')
        assert a.history != b.history

    def test_resume_matches_uninterrupted(self, tiny_experiment, tmp_path):
        full = run_experiment(tiny_experiment, tmp_path / 'full')

        def interrupt(message, batch, total):
            if message.startswith('epoch 2'):
                raise RuntimeError('interrupted')

        with pytest.raises(RuntimeError):
            run_experiment(tiny_experiment, tmp_path / 'resumed', progress_callback=interrupt)
        resumed = run_experiment(tiny_experiment, tmp_path / 'resumed', resume=True)
        assert resumed.history == full.history
        assert (tmp_path / 'full' / 'metrics.csv').read_bytes() == \
            (tmp_path / 'resumed' / 'metrics.csv').read_bytes()

    def test_per_epoch_probes(self, tiny_experiment, tmp_path):
        exp = replace(tiny_experiment, train=replace(tiny_experiment.train, epochs=1, per_epoch_probes=True))
        m = run_experiment(exp, tmp_path).history[0]
        assert (tmp_path / 'best_worst' / f"epoch_001_best_{m.best_image:04d}_pred.png").exists()
        assert (tmp_path / 'best_worst' / f"epoch_001_worst_{m.worst_image:04d}_truth.png").exists()

    def test_fixed_probes_every_epoch(self, tiny_experiment, tmp_path):
        exp = replace(tiny_experiment, train=replace(tiny_experiment.train, epochs=3, per_epoch_probes=True))
        run_experiment(exp, tmp_path)
        for epoch in (1, 2, 3):
            for i in range(exp.train.probe_count):
                for kind in ('pred', 'truth'):
                    assert (tmp_path / 'probes' / f"epoch_{epoch:03d}_{i:04d}_{kind}.png").exists()

    def test_fixed_probes_off_by_default(self, tiny_experiment, tmp_path):
        run_experiment(tiny_experiment, tmp_path)
        assert not list((tmp_path / 'probes').glob('epoch_*'))
        assert (tmp_path / 'probes' / '0000_pred.png').exists()

    def test_failure_flushes_partial_metrics(self, tiny_experiment, tmp_path):
        calls = []

        def progress(message, batch, total):
            calls.append(message)
            if message.startswith('epoch 2'):
                raise TrainingDivergedError(batch, float('nan'))

        with pytest.raises(TrainingDivergedError):
            run_experiment(tiny_experiment, tmp_path, progress_callback=progress)
        summary = json.loads((tmp_path / 'summary.json').read_text())
        assert summary['completed'] is False
        assert len(summary['epochs']) == 1

    def test_evaluate_checkpoint(self, tiny_experiment, tmp_path):
        result = run_experiment(tiny_experiment, tmp_path)
        evaluated = evaluate_checkpoint(tmp_path / 'checkpoint', tmp_path / 'synthetic.json')
        assert evaluated.summary == result.best.val

    @pytest.mark.slow
    def test_memorizes_single_sample(self, tiny_synthetic):
        spec = SyntheticSceneSpec.from_dict(tiny_synthetic)
        data = SyntheticDataset(spec, 1)
        exp = ExperimentConfig(name='memorize')
        exp = replace(exp, train=replace(exp.train, epochs=200, batch_size=1, augment=False, crop_size=16,
                                         base_lr=0.05),
                      model=replace(exp.model, stage_widths=(8, 16, 16), blocks_per_stage=1, decoder_width=16))
        trainer = Trainer(exp, data, data)
        losses = [trainer.train_epoch(epoch).train_loss for epoch in range(1, 201)]
        assert losses[-1] < 0.01

    @pytest.mark.slow
    def test_channel_dropout_beats_none(self, tmp_path):
        """5 个种子上，调度版 all-chandrop 的最佳验证 mIoU 中位数高于 none，且 none 明显过拟合"""
        train = TrainConfig(epochs=40, batch_size=4, train_count=200, val_count=60,
                            synthetic={'canvas': 32}, crop_size=32, probe_count=0)
        matrix = {e.name: e for e in table2_matrix(train, scheduled=None)}
        none_runs, drop_runs = [], []
        for seed in range(5):
            none_runs.append(run_experiment(matrix['none'].with_seed(seed), tmp_path / f"none{seed}"))
            drop_runs.append(run_experiment(matrix['all-chandrop-scheduled'].with_seed(seed),
                                            tmp_path / f"drop{seed}"))
        assert np.median([r.best.val.mean for r in drop_runs]) > np.median([r.best.val.mean for r in none_runs])
        gaps = [r.best.train_miou - r.best.val.mean for r in none_runs]
        assert np.median(gaps) >= 0.1


class TestEmit:

    def test_line_count_and_exact_json(self, tmp_path):
        history = [metrics(e, 0.1 * e + 1 / 3) for e in range(1, 4)]
        emit_metrics(history, tmp_path, best=history[-1])
        assert len((tmp_path / 'metrics.csv').read_text().splitlines()) == 4
        payload = json.loads((tmp_path / 'summary.json').read_text())
        recovered = [EpochMetrics.from_dict(m) for m in payload['epochs']]
        assert recovered == history
        assert payload['best_epoch']['epoch'] == 3

    def test_csv_17_digits(self, tmp_path):
        emit_metrics([metrics(1, 1 / 3)], tmp_path)
        row = (tmp_path / 'metrics.csv').read_text().splitlines()[1].split(',')
        assert row[EPOCH_COLUMNS.index('mean_miou')] == '0.33333333333333331'
        assert float(row[EPOCH_COLUMNS.index('mean_miou')]) == 1 / 3

    def test_curves(self, tmp_path):
        history = [metrics(e, 0.2 * e) for e in range(1, 5)]
        paths = emit_metrics(history, tmp_path)
        assert sorted(p.name for p in paths[2:]) == sorted(CURVES)
        assert sorted(CURVES) == ['train_loss.png', 'train_mious.png', 'val_loss.png', 'val_mious.png']
        for path in paths[2:]:
            assert path.read_bytes()[:8] == b'\x89PNG\r\n\x1a\n'

    def test_curves_tolerate_nan(self, tmp_path):
        history = [metrics(1, 0.5), replace(metrics(2, 0.5), train_loss=float('nan'))]
        assert len(plot_curves(history, tmp_path / 'nested')) == 4

    def test_empty(self, tmp_path):
        with pytest.raises(EvaluationError):
            emit_metrics([], tmp_path)

    def test_numpy_scalars(self, tmp_path):
        write_json(tmp_path / 'x.json', {'a': np.float64(0.1), 'b': np.int64(3)})
        assert json.loads((tmp_path / 'x.json').read_text()) == {'a': 0.1, 'b': 3}
