import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from corruptions import specs_to_json
from encoder import init_model, load_checkpoint
from losses import LossConfig
from numerics import RngStream
from trainer import (
    METRIC_COLUMNS, OptState, StepOptions, TrainingSet, build_batch, compute_loss_and_grads,
    resolve_frozen, sample_indices, train, train_step,
)
from utils import set_debug


@pytest.fixture(scope='module')
def train_set(tiny_dataset):
    return TrainingSet.from_manifest(tiny_dataset)


@pytest.fixture
def pairs(train_set):
    return build_batch(train_set, 4, RngStream(0, 'batch/0'))


@pytest.fixture
def model(train_set):
    return init_model(seed=0, d=8, num_classes=train_set.num_classes)


class TestBatches:
    def test_training_set(self, train_set):
        assert train_set.num_classes == 4
        assert len(train_set) == 16
        assert train_set.images.shape == (16, 64, 64, 3)

    def test_batch_size_and_labels(self, pairs, train_set):
        assert len(pairs) == 4
        for pair in pairs:
            assert 0 <= pair.label < train_set.num_classes
            assert train_set.class_ids[pair.label] == pair.class_id
            assert 1 <= len(pair.specs) <= 2

    def test_deterministic(self, train_set):
        a = build_batch(train_set, 4, RngStream(0, 'batch/3'))
        b = build_batch(train_set, 4, RngStream(0, 'batch/3'))
        for x, y in zip(a, b):
            npt.assert_array_equal(x.x_low, y.x_low)
            assert x.specs == y.specs

    def test_classes_drawn_uniformly(self, train_set):
        rng = RngStream(0, 'histogram')
        drawn = np.concatenate([sample_indices(train_set, 16, rng) for _ in range(250)])
        counts = np.bincount(train_set.labels[drawn], minlength=train_set.num_classes)
        assert counts.sum() == 4000
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_batches_cover_classes_uniformly(self, train_set):
        labels = [pair.label for b in range(40) for pair in build_batch(train_set, 8, RngStream(b, 'batch'))]
        counts = np.bincount(labels, minlength=train_set.num_classes)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_batch_size_one_rejected(self, train_set):
        with pytest.raises(ValueError):
            build_batch(train_set, 1, RngStream(0, 'batch/0'))


class TestOptimiser:
    def test_cosine_schedule(self):
        opt = OptState(lr0=0.1, total_steps=10)
        assert opt.lr_at(0) == pytest.approx(0.1)
        assert opt.lr_at(5) == pytest.approx(0.05)
        assert opt.lr_at(10) == pytest.approx(0.0)

    def test_momentum_and_weight_decay(self):
        opt = OptState(lr0=1.0, momentum=0.5, weight_decay=0.1, total_steps=1000)
        p = {'w': np.array([1.0])}
        g = {'w': np.array([2.0])}
        lr = opt.apply(p, g)
        assert lr == 1.0
        npt.assert_allclose(p['w'], [1.0 - 2.1])
        lr = opt.apply(p, g)
        npt.assert_allclose(p['w'], [-1.1 - lr * (0.5 * 2.1 + 2.0 + 0.1 * -1.1)])

    def test_frozen_untouched(self):
        opt = OptState(total_steps=10, frozen={'w'})
        p = {'w': np.array([1.0]), 'v': np.array([1.0])}
        opt.apply(p, {'w': np.array([5.0]), 'v': np.array([5.0])})
        assert p['w'][0] == 1.0 and p['v'][0] != 1.0

    def test_resolve_frozen(self, model):
        names = list(model.named())
        frozen = resolve_frozen(['encoder.conv1'], names)
        assert frozen == {'encoder.conv1_w', 'encoder.conv1_b'}
        assert {n for n in names if n.startswith('qcb.')} == resolve_frozen(['qcb'], names)
        with pytest.raises(ValueError):
            resolve_frozen(['decoder'], names)


class TestLoss:
    def test_zero_weights_leave_classification_only(self, model, pairs):
        cfg = LossConfig(alpha=0.0, beta=0.0)
        result = compute_loss_and_grads(model, pairs, cfg, StepOptions())
        assert result.report.total == result.report.l_noi
        assert result.report.l_info1 > 0.0 and result.report.l_info2 > 0.0

    def test_total_combines_terms(self, model, pairs):
        cfg = LossConfig(alpha=0.3, beta=0.7)
        r = compute_loss_and_grads(model, pairs, cfg, StepOptions()).report
        assert r.total == pytest.approx(r.l_noi + 0.3 * r.l_info1 + 0.7 * r.l_info2)

    def test_pure(self, model, pairs):
        before = {k: v.copy() for k, v in model.named().items()}
        compute_loss_and_grads(model, pairs, LossConfig(), StepOptions())
        for name, value in model.named().items():
            npt.assert_array_equal(value, before[name])

    def test_qcb_off_gives_zero_qcb_grads(self, model, pairs):
        result = compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(qcb_enabled=False))
        assert result.report.l_info2 == 0.0
        assert not any(t.any() for t in result.grads.qcb.named('qcb').values())

    def test_descriptor_in_unit_range(self, model, pairs):
        result = compute_loss_and_grads(model, pairs, LossConfig(), StepOptions())
        assert result.desc.shape == (8,)
        assert result.desc.min() >= 0.0 and result.desc.max() <= 1.0

    def test_ema_variant_updates_running_stats(self, model, pairs):
        result = compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(loss='adaface_ema'))
        assert result.norm_stats.std != 100.0

    def test_crossentropy_supervision_needs_aux(self, model, pairs):
        with pytest.raises(ValueError):
            compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(qcb_supervision='crossentropy'))

    def test_crossentropy_supervision(self, train_set, pairs):
        model = init_model(seed=0, d=8, num_classes=train_set.num_classes, aux_head=True)
        result = compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(qcb_supervision='crossentropy'))
        assert result.grads.aux.W.any()
        assert math.isfinite(result.report.l_info2)

    def test_non_finite_loss(self, model, pairs):
        pairs[0].x_low = np.full_like(pairs[0].x_low, np.nan)
        with np.errstate(invalid='ignore'):
            with pytest.raises(FloatingPointError):
                compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(), batch_id=7)

    @pytest.mark.parametrize('debug', [False, True])
    def test_non_finite_loss_dumps_batch(self, model, pairs, capsys, debug):
        set_debug(debug)
        pairs[1].x_low = np.full_like(pairs[1].x_low, np.nan)
        try:
            with np.errstate(invalid='ignore'):
                with pytest.raises(FloatingPointError):
                    compute_loss_and_grads(model, pairs, LossConfig(), StepOptions(), batch_id=7)
        finally:
            set_debug(False)
        err = capsys.readouterr().err
        assert 'non-finite loss in batch 7' in err
        for i, pair in enumerate(pairs):
            assert f"pair {i}: class {pair.class_id} specs {json.dumps(specs_to_json(pair.specs))}" in err
        assert ('x_low 0/' in err) == debug

    def test_step_moves_parameters_and_keeps_head_normalised(self, model, pairs):
        before = model.encoder.proj_w.copy()
        opt = OptState(total_steps=4)
        report = train_step(model, pairs, LossConfig(), opt, StepOptions())
        assert report.lr == pytest.approx(0.05)
        assert not np.array_equal(model.encoder.proj_w, before)
        npt.assert_allclose(np.linalg.norm(model.head.W, axis=0), 1.0)


class TestTrain:
    def test_smoke(self, tiny_config):
        result = train(tiny_config)
        assert len(result.metrics) == 1
        row = result.metrics[0]
        assert all(math.isfinite(row[c]) for c in METRIC_COLUMNS[1:])
        header = result.metrics_path.read_text(encoding='utf-8').splitlines()[0]
        assert header == ','.join(METRIC_COLUMNS)
        loaded = load_checkpoint(result.checkpoint_path)
        assert loaded.meta['class_ids'] == [0, 1, 2, 3]
        assert loaded.meta['config']['d'] == 8

    def test_deterministic_metrics(self, tiny_config, tmp_path):
        a = train(tiny_config, tmp_path / 'a')
        b = train(tiny_config, tmp_path / 'b')
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_frozen_layer_keeps_init(self, tiny_config):
        config = tiny_config.replace(freeze=['encoder.conv1'])
        result = train(config)
        init = init_model(config.seed, config.d, 4)
        npt.assert_array_equal(result.model.encoder.conv1_w, init.encoder.conv1_w)
        assert not np.array_equal(result.model.encoder.conv2_w, init.encoder.conv2_w)

    def test_on_epoch_callback(self, tiny_config):
        rows = []
        train(tiny_config.replace(epochs=2), on_epoch=rows.append)
        assert [r['epoch'] for r in rows] == [1, 2]
        assert rows[1]['lr'] < rows[0]['lr']

    def test_total_loss_falls_over_ten_epochs(self, tiny_config):
        result = train(tiny_config.replace(epochs=10))
        assert result.metrics[-1]['total'] < result.metrics[0]['total']
