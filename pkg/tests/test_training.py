"""Adam semantics, weight-decay selectivity, metrics, training loop contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegencoder.data import Scaler, Trial, TrialSet, apply_scaler, fit_scaler
from eegencoder.model import EEGEncoder, ModelConfig, load_checkpoint
from eegencoder.tensor import ContractError, Tensor
from eegencoder.training import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate,
    kappa_from_confusion,
    report_from_predictions,
    scaler_from_extras,
    train,
    trials_to_batch,
)


def _entries(values, decayed=False):
    tensors = [Tensor(v, requires_grad=True) for v in values]
    return [(f"p{i}", t, decayed) for i, t in enumerate(tensors)], tensors


def test_adam_first_step_magnitude_is_lr():
    entries, tensors = _entries([np.array([1.0, -2.0, 0.5])])
    tensors[0].grad = np.array([0.3, -0.7, 1.5])
    config = TrainConfig(lr=0.001)
    adam_step(entries, AdamState(), config)
    delta = np.abs(tensors[0].data - np.array([1.0, -2.0, 0.5]))
    assert np.allclose(delta, config.lr, rtol=1e-4)


def test_adam_zero_grad_zero_decay_leaves_parameter():
    entries, tensors = _entries([np.array([0.25, -1.5])])
    tensors[0].grad = np.zeros(2)
    adam_step(entries, AdamState(), TrainConfig(mlp_weight_decay=0.0))
    assert np.array_equal(tensors[0].data, [0.25, -1.5])


def test_decoupled_decay_closed_form_shrinkage():
    start = np.array([2.0, -3.0, 0.125])
    entries, tensors = _entries([start.copy()], decayed=True)
    config = TrainConfig(lr=0.001, mlp_weight_decay=0.5)
    state = AdamState()
    for step in range(1, 6):
        tensors[0].grad = np.zeros(3)
        adam_step(entries, state, config)
        expected = start * (1.0 - config.lr * config.mlp_weight_decay) ** step
        assert np.max(np.abs(tensors[0].data - expected) / np.abs(expected)) < 1e-12


def test_missing_grad_is_contract_error():
    entries, _ = _entries([np.ones(2)])
    with pytest.raises(ContractError, match="no gradient"):
        adam_step(entries, AdamState(), TrainConfig())


def test_weight_decay_touches_only_head_parameters():
    config = ModelConfig.miniature()
    model = EEGEncoder(config, np.random.default_rng(0))
    entries = model.parameter_entries()
    assert any(decayed for _, _, decayed in entries)
    before = {name: t.data.copy() for name, t, _ in entries}
    for _, t, _ in entries:
        t.grad = np.zeros_like(t.data)
    train_config = TrainConfig(lr=0.001, mlp_weight_decay=0.5)
    adam_step(entries, AdamState(), train_config)
    factor = 1.0 - train_config.lr * train_config.mlp_weight_decay
    for name, t, decayed in entries:
        if decayed:
            assert ".head_mlp." in name
            expected = before[name] * factor
            scale = np.maximum(np.abs(expected), 1e-300)
            assert np.max(np.abs(t.data - expected) / scale) < 1e-12
        else:
            assert np.array_equal(t.data, before[name]), name


# -- metrics ---------------------------------------------------------------------


def test_perfect_predictions_metrics():
    labels = np.array([0, 1, 2, 3] * 5)
    report = report_from_predictions(labels, labels)
    assert report.accuracy == 1.0
    assert report.kappa == 1.0
    assert np.array_equal(report.per_class_recall, np.ones(4))
    assert np.array_equal(report.confusion, np.eye(4, dtype=np.int64) * 5)


def test_kappa_reproduces_reported_pair():
    # balanced 288-trial confusion with uniform predicted marginals
    confusion = np.array(
        [
            [63, 3, 3, 3],
            [3, 62, 4, 3],
            [3, 3, 62, 4],
            [3, 4, 3, 62],
        ]
    )
    assert confusion.sum() == 288
    assert np.all(confusion.sum(axis=0) == 72) and np.all(confusion.sum(axis=1) == 72)
    acc = np.trace(confusion) / 288
    kappa = kappa_from_confusion(confusion)
    assert kappa == pytest.approx((acc - 0.25) / 0.75, abs=1e-12)
    assert round(100 * acc, 2) == 86.46
    assert round(100 * kappa, 2) == 81.94


def _kappa_oracle(confusion):
    confusion = np.asarray(confusion, dtype=float)
    n = confusion.sum()
    p_o = np.trace(confusion) / n
    p_e = sum(confusion[i, :].sum() * confusion[:, i].sum() for i in range(len(confusion))) / n**2
    return (p_o - p_e) / (1.0 - p_e)


def test_kappa_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(500):
        confusion = rng.integers(0, 30, size=(4, 4))
        if confusion.sum() == 0:
            continue
        p_e = (confusion.sum(1) / confusion.sum()) @ (confusion.sum(0) / confusion.sum())
        if p_e >= 1.0:
            continue
        assert kappa_from_confusion(confusion) == pytest.approx(_kappa_oracle(confusion), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.int64, (4, 4), elements=st.integers(0, 40)))
def test_kappa_bounds(confusion):
    if confusion.sum() == 0:
        return
    kappa = kappa_from_confusion(confusion)
    assert -1.0 - 1e-12 <= kappa <= 1.0 + 1e-12


def test_evaluate_empty_set_rejected():
    model = EEGEncoder(ModelConfig.miniature(), np.random.default_rng(2))
    with pytest.raises(ContractError):
        evaluate(model, TrialSet([]))


# -- training loop ----------------------------------------------------------------


def _mini_separable_set(n=16, seed=0, noise=0.05):
    """Four fixed class templates (3 channels x 63 samples) plus small noise."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((4, 3, 63))
    trials = [
        Trial(templates[i % 4] + noise * rng.standard_normal((3, 63)), i % 4) for i in range(n)
    ]
    return TrialSet(trials)


def _mini_model(seed=0):
    return EEGEncoder(ModelConfig.miniature(), np.random.default_rng([seed, 0]))


def test_loss_decreases_over_twenty_epochs():
    trials = _mini_separable_set()
    scaled = apply_scaler(trials, fit_scaler(trials))
    model = _mini_model(3)
    _, history = train(model, scaled, TrainConfig(epochs=21, batch_size=8, seed=3))
    assert history[20].loss < history[0].loss


def test_fixed_seed_history_bit_identical():
    def run():
        trials = apply_scaler(_mini_separable_set(), fit_scaler(_mini_separable_set()))
        model = _mini_model(4)
        _, history = train(model, trials, TrainConfig(epochs=3, batch_size=8, seed=4))
        return [(h.epoch, h.loss, h.train_acc) for h in history]

    assert run() == run()


def test_batch_larger_than_dataset_wraps_to_single_batch():
    trials = apply_scaler(_mini_separable_set(n=6), fit_scaler(_mini_separable_set(n=6)))
    model = _mini_model(5)
    _, history = train(model, trials, TrainConfig(epochs=2, batch_size=64, seed=5))
    assert len(history) == 2  # one under-full batch per epoch, no error


def test_on_epoch_callback_stops_early():
    trials = apply_scaler(_mini_separable_set(), fit_scaler(_mini_separable_set()))
    model = _mini_model(6)
    _, history = train(
        model, trials, TrainConfig(epochs=50, batch_size=8, seed=6), on_epoch=lambda s: s.epoch >= 4
    )
    assert len(history) == 5


def test_checkpoint_roundtrip_evaluation_bit_identical(tmp_path):
    trials = _mini_separable_set(n=12, seed=7)
    scaler = fit_scaler(trials)
    scaled = apply_scaler(trials, scaler)
    model = _mini_model(7)
    state, _ = train(model, scaled, TrainConfig(epochs=2, batch_size=6, seed=7), checkpoint_dir=tmp_path, scaler=scaler)
    report_before = evaluate(model, scaled)

    loaded, extras = load_checkpoint(tmp_path / "checkpoint.bin")
    restored_scaler = scaler_from_extras(extras)
    assert isinstance(restored_scaler, Scaler)
    assert np.array_equal(restored_scaler.mean, scaler.mean)
    report_after = evaluate(loaded, apply_scaler(trials, restored_scaler))
    assert np.array_equal(report_before.confusion, report_after.confusion)
    assert report_before.accuracy == report_after.accuracy
    assert report_before.kappa == report_after.kappa
    assert int(extras["adam.step"][0]) == state.adam.step


def test_trials_to_batch_layout():
    trials = _mini_separable_set(n=4)
    x, labels = trials_to_batch(trials, [0, 1])
    assert x.shape == (2, 1, 63, 3)
    assert np.array_equal(x.data[0, 0, :, 1], trials.trials[0].signal[1])
    assert labels.tolist() == [0, 1]


def test_eval_thread_sharding_is_deterministic():
    trials = apply_scaler(_mini_separable_set(n=10), fit_scaler(_mini_separable_set(n=10)))
    model = _mini_model(8)
    serial = evaluate(model, trials, n_threads=1)
    threaded = evaluate(model, trials, n_threads=4)
    assert np.array_equal(serial.confusion, threaded.confusion)
