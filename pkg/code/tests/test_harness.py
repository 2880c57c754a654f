import csv
import json

import numpy as np
import pytest

import model as net
from attack import AttackConfig
from conftest import MNIST_DIR, digit_like
from dataio import Dataset, load_mnist, subset
from harness import (REPORT_COLUMNS, ModelBundle, alpha_ratio, batch_size_sweep, clean_accuracy, default_method,
                     emit_histogram, emit_report, epsilon_sweep, evaluate, pipeline_comparison, pixel_histogram)
from model import ModelSpec
from pipeline import Pipeline
from trainer import TrainConfig, save_checkpoint
from rp_utils import ConfigError

FAST_ATTACK = AttackConfig(epsilon=0.2, steps=2, restarts=1, seed=1)


@pytest.fixture
def bundle(tiny_spec):
    return ModelBundle(spec=tiny_spec, pipeline=Pipeline.from_name('all-three'),
                       params=net.init_parameters(tiny_spec, seed=3))


@pytest.fixture
def raw_bundle():
    spec = ModelSpec(input_height=12, input_width=12, input_channels=1, conv1_filters=0, conv2_filters=0,
                     dense_units=0, profile_name='test')
    return ModelBundle(spec=spec, pipeline=Pipeline.from_name('none', encode=False),
                       params=net.init_parameters(spec, seed=0))


def test_alpha_reproduces_reported_values():
    assert alpha_ratio(99.43, 98.65) == pytest.approx(49.80, abs=0.01)
    assert alpha_ratio(99.47, 98.61) == pytest.approx(49.78, abs=0.01)


@pytest.mark.parametrize("x, y", [(99.0, 1.0), (50.0, 50.0), (12.5, 87.25), (0.0, 3.0)])
def test_alpha_is_symmetric(x, y):
    assert alpha_ratio(x, y) + alpha_ratio(y, x) == pytest.approx(100.0, abs=1e-6)


def test_alpha_undefined_without_accuracy():
    assert alpha_ratio(0.0, 0.0) is None


def test_constant_model_accuracy_is_class_share(raw_bundle):
    params = {name: np.zeros_like(value) for name, value in raw_bundle.params.items()}
    params['out.bias'][3] = 1.0
    dataset = digit_like(60, seed=2)
    accuracy = clean_accuracy(raw_bundle.spec, params, raw_bundle.pipeline, dataset)
    assert accuracy == pytest.approx(100.0 * np.mean(dataset.labels == 3))


def test_duplicated_dataset_keeps_accuracy(bundle, tiny_dataset):
    doubled = Dataset(images=np.concatenate([tiny_dataset.images] * 2),
                      labels=np.concatenate([tiny_dataset.labels] * 2))
    single = clean_accuracy(bundle.spec, bundle.params, bundle.pipeline, tiny_dataset, batch_size=60)
    assert clean_accuracy(bundle.spec, bundle.params, bundle.pipeline, doubled, batch_size=60) == single


def test_clean_accuracy_needs_data(bundle):
    empty = Dataset(images=np.zeros((0, 1, 12, 12), dtype=np.float32), labels=np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError, match='nonempty'):
        clean_accuracy(bundle.spec, bundle.params, bundle.pipeline, empty)


def test_default_method_follows_pipeline():
    assert default_method(Pipeline.from_name('tanh+bn')) == 'lspga'
    assert default_method(Pipeline.from_name('none', encode=False)) == 'fgsm'


def test_evaluate_without_attack(bundle, tiny_dataset):
    report = evaluate(bundle, tiny_dataset, FAST_ATTACK, attack=False, batch_size=30)
    assert report.attacked_accuracy == report.clean_accuracy
    if report.clean_accuracy:
        assert report.alpha == pytest.approx(50.0)
    assert report.pipeline == 'all-three'
    assert report.method == 'lspga'


def test_evaluate_lspga_report(bundle, tiny_dataset):
    report = evaluate(bundle, tiny_dataset, FAST_ATTACK, batch_size=30)
    assert 0 <= report.attacked_accuracy <= report.clean_accuracy <= 100
    assert report.attack == FAST_ATTACK
    assert report.seed == 1


def test_evaluate_fgsm_on_raw_model(raw_bundle, tiny_dataset):
    report = evaluate(raw_bundle, tiny_dataset, AttackConfig(epsilon=0.0), batch_size=30)
    assert report.method == 'fgsm'
    assert report.attacked_accuracy == report.clean_accuracy
    ifgsm = evaluate(raw_bundle, tiny_dataset, AttackConfig(epsilon=0.1), method='ifgsm', alpha_step=0.05, iters=3)
    assert 0 <= ifgsm.attacked_accuracy <= 100


def test_fgsm_on_encoded_model_rejected(bundle, tiny_dataset):
    with pytest.raises(ConfigError, match='continuous-input'):
        evaluate(bundle, tiny_dataset, FAST_ATTACK, method='fgsm')


def test_epsilon_zero_sweep_matches_clean(bundle, tiny_dataset):
    rows = epsilon_sweep(bundle, tiny_dataset, [0.0], FAST_ATTACK, batch_size=30)
    assert len(rows) == 1
    assert rows[0].report.attacked_accuracy == rows[0].report.clean_accuracy
    assert rows[0].report.attack.epsilon == 0.0


def test_epsilon_sweep_rows(bundle, tiny_dataset):
    rows = epsilon_sweep(bundle, tiny_dataset, [0.1, 0.3], FAST_ATTACK, batch_size=30)
    assert [(row.param, row.value) for row in rows] == [('epsilon', 0.1), ('epsilon', 0.3)]
    assert rows[0].report.clean_accuracy == rows[1].report.clean_accuracy
    assert all(row.report.attack.steps == FAST_ATTACK.steps for row in rows)


def test_epsilon_sweep_must_be_sorted(bundle, tiny_dataset):
    with pytest.raises(ConfigError, match='sorted'):
        epsilon_sweep(bundle, tiny_dataset, [0.3, 0.1], FAST_ATTACK)


def test_batch_size_sweep(bundle, tiny_dataset):
    rows = batch_size_sweep(bundle, tiny_dataset, [30, 10], AttackConfig(epsilon=0.0))
    assert [row.value for row in rows] == [10, 30]
    for row in rows:
        assert row.param == 'batch-size'
        assert row.report.attacked_accuracy == row.report.clean_accuracy
    with pytest.raises(ConfigError, match='batch sizes'):
        batch_size_sweep(bundle, tiny_dataset, [0, 10], FAST_ATTACK)


@pytest.mark.slow
def test_pipeline_comparison_trains_both_variants():
    train_set, test_set = digit_like(30, seed=1, size=28), digit_like(20, seed=2, size=28)
    rows = pipeline_comparison(train_set, test_set, ['none', 'tanh+bn'], 'fast',
                               TrainConfig(epochs=1, batch_size=10), AttackConfig(epsilon=0.2, steps=2),
                               batch_size=20)
    assert [(row.value, row.report.trained_with_adversary) for row in rows] == \
        [('none', False), ('none', True), ('tanh+bn', False), ('tanh+bn', True)]
    assert all(row.param == 'pipeline' for row in rows)


@pytest.mark.slow
def test_pipeline_comparison_accepts_custom_stage_orders():
    train_set, test_set = digit_like(20, seed=3, size=28), digit_like(10, seed=4, size=28)
    rows = pipeline_comparison(train_set, test_set, ['sigmoid+bn', 'TANH+smooth-avg+bn'], 'fast',
                               TrainConfig(epochs=1, batch_size=10), AttackConfig(epsilon=0.2, steps=1),
                               batch_size=10)
    assert [row.value for row in rows] == ['sigmoid+bn', 'sigmoid+bn', 'tanh+smooth-avg+bn', 'tanh+smooth-avg+bn']
    assert [row.report.trained_with_adversary for row in rows] == [False, True, False, True]
    assert all(row.report.pipeline == row.value for row in rows)


def test_histogram_of_identity_pipeline(tiny_dataset):
    images = tiny_dataset.images.copy()
    images[0, 0, 0, 0] = 0.0
    dataset = Dataset(images=images, labels=tiny_dataset.labels)
    before, after = pixel_histogram(dataset, Pipeline.from_name('none'))
    assert np.array_equal(before.counts, after.counts)
    assert before.counts.sum() == images.size
    assert before.mean == pytest.approx(float(images.astype(np.float64).mean() * 255))
    assert before.count_std == pytest.approx(float(before.counts.std()))


def test_histogram_spreads_after_all_three(tiny_dataset):
    before, after = pixel_histogram(tiny_dataset, Pipeline.from_name('all-three'), batch_size=20)
    assert after.counts.sum() == before.counts.sum() == tiny_dataset.images.size
    assert after.std / before.std >= 2


def make_rows(bundle, dataset):
    return epsilon_sweep(bundle, dataset, [0.0, 0.2], FAST_ATTACK, batch_size=30)


def test_csv_report_layout(bundle, tiny_dataset, tmp_path):
    rows = make_rows(bundle, tiny_dataset)
    path = emit_report(rows, 'csv', str(tmp_path / 'sweep.csv'))
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == ('param,value,pipeline,adv_trained,clean_acc,attacked_acc,alpha,epsilon,delta,xi,'
                        'steps,restarts,seed,seconds')
    with open(path) as f:
        records = list(csv.DictReader(f))
    assert len(records) == 2
    first = records[0]
    assert first['param'] == 'epsilon'
    assert first['value'] == '0.0000'
    assert first['pipeline'] == 'all-three'
    assert first['adv_trained'] == '0'
    assert first['steps'] == '2'
    assert first['clean_acc'] == f"{rows[0].report.clean_accuracy:.4f}"


def test_csv_leaves_missing_alpha_empty(raw_bundle, tiny_dataset, tmp_path):
    params = {name: np.zeros_like(value) for name, value in raw_bundle.params.items()}
    params['out.bias'][0] = 1.0
    labels = np.full(len(tiny_dataset), 5, dtype=np.int64)
    wrong = ModelBundle(spec=raw_bundle.spec, pipeline=raw_bundle.pipeline, params=params)
    rows = epsilon_sweep(wrong, Dataset(images=tiny_dataset.images, labels=labels), [0.1], AttackConfig())
    path = emit_report(rows, None, str(tmp_path / 'zero.csv'))
    with open(path) as f:
        record = next(csv.DictReader(f))
    assert record['clean_acc'] == '0.0000'
    assert record['alpha'] == ''


def test_json_report(bundle, tiny_dataset, tmp_path):
    path = emit_report(make_rows(bundle, tiny_dataset), None, str(tmp_path / 'sweep.json'))
    with open(path) as f:
        records = json.load(f)
    assert [list(record) for record in records] == [list(REPORT_COLUMNS)] * 2
    assert records[1]['epsilon'] == 0.2
    assert records[0]['adv_trained'] is False


def test_reports_are_reproducible(bundle, tiny_dataset):
    first = [row.record() for row in make_rows(bundle, tiny_dataset)]
    second = [row.record() for row in make_rows(bundle, tiny_dataset)]
    for a, b in zip(first, second):
        a.pop('seconds')
        b.pop('seconds')
    assert first == second


def test_report_format_validation(bundle, tiny_dataset, tmp_path):
    rows = epsilon_sweep(bundle, tiny_dataset, [0.0], FAST_ATTACK, batch_size=30)
    with pytest.raises(ConfigError, match='format'):
        emit_report(rows, None, str(tmp_path / 'sweep.txt'))
    with pytest.raises(ConfigError):
        emit_report([], 'csv', str(tmp_path / 'empty.csv'))


def test_histogram_files(tiny_dataset, tmp_path):
    before, after = pixel_histogram(tiny_dataset, Pipeline.from_name('tanh+bn'))
    csv_path = emit_histogram(before, after, str(tmp_path / 'hist.csv'))
    with open(csv_path) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'bin,before,after'
    assert len(lines) == 257
    with open(emit_histogram(before, after, str(tmp_path / 'hist.json'))) as f:
        summary = json.load(f)
    assert set(summary) == {'before', 'after'}
    assert summary['after']['std'] == pytest.approx(after.std)


def test_bundle_from_checkpoint(bundle, tmp_path):
    path = str(tmp_path / 'model.rpn')
    save_checkpoint(path, bundle.spec, bundle.pipeline, bundle.params, trained_with_adversary=True)
    loaded = ModelBundle.from_checkpoint(path)
    assert loaded.pipeline == bundle.pipeline
    assert loaded.trained_with_adversary


@pytest.mark.mnist
def test_all_three_spreads_mnist_pixels():
    test_set = subset(load_mnist(MNIST_DIR).test, 2000, seed=0)
    before, after = pixel_histogram(test_set, Pipeline.from_name('all-three'))
    assert after.std / before.std >= 2
