"""Acceptance gate: one test per criterion, each at its stated tolerance.

Every test prints a single `[criterion N] ... PASS` line on success (visible
with `pytest -s` or in captured output), and fails loudly otherwise.
"""

import json
import time

import numpy as np
import pytest

import eegencoder.gradcheck as gradcheck
from eegencoder.attention import StableTransformer, stack_forward
from eegencoder.cli import EXIT_OK, main
from eegencoder.data import (
    Trial,
    TrialSet,
    apply_scaler,
    fit_scaler,
    load_trialset,
    save_trialset,
    synth_trials,
)
from eegencoder.model import DstsBlock, EEGEncoder, ModelConfig, load_checkpoint, projector_forward
from eegencoder.nn import RmsNormLayer, rms_norm
from eegencoder.tcn import TcnStack, tcn_forward
from eegencoder.tensor import Tensor, no_grad, softmax
from eegencoder.training import (
    TrainConfig,
    evaluate,
    kappa_from_confusion,
    scaler_from_extras,
    train,
    trials_to_batch,
)


def _ok(n, label):
    print(f"[criterion {n}] {label}: PASS")


def test_criterion_1_gradient_suite():
    start = time.time()
    results = gradcheck.run()
    elapsed = time.time() - start
    failures = {name: err for name, err in results.items() if err >= 1e-3}
    assert not failures, f"gradient check failures: {failures}"
    assert "model_end_to_end" in results
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    _ok(1, f"gradient suite ({len(results)} ops, worst {max(results.values()):.2e}, {elapsed:.1f}s)")


def test_criterion_2_causality_100_cases():
    rng = np.random.default_rng(42)
    checked = 0
    for case in range(100):
        d, heads = 8, 2
        t_len = int(rng.integers(3, 12))
        b = int(rng.integers(1, 3))
        cut = int(rng.integers(0, t_len - 1))
        x = rng.standard_normal((b, t_len, d))
        perturbed = x.copy()
        perturbed[:, cut + 1 :, :] += rng.standard_normal((b, t_len - cut - 1, d)) + 0.5

        kind = case % 3
        if kind == 0:
            stack = StableTransformer(d, 2, heads, rng, k_clip=4)
            fwd = lambda arr: stack_forward(Tensor(arr), stack, mask="causal").data
        elif kind == 1:
            tcn = TcnStack(d, 2, 3, rng)
            fwd = lambda arr: tcn_forward(Tensor(arr), tcn).data
        else:
            config = ModelConfig.miniature()
            block = DstsBlock(config, rng)
            fwd = lambda arr: block.sequence_features(Tensor(arr)).data

        base, shifted = fwd(x), fwd(perturbed)
        assert np.array_equal(base[:, : cut + 1], shifted[:, : cut + 1]), f"case {case} leaked"
        assert not np.array_equal(base[:, cut + 1 :], shifted[:, cut + 1 :]), f"case {case} inert"
        checked += 1
    assert checked == 100
    _ok(2, "causality over 100 randomized transformer/TCN/DSTS cases (exact)")


def test_criterion_3_shape_contract():
    config = ModelConfig()
    assert (1125 // 7) // 7 == 22
    assert config.projected_length() == 22
    model = EEGEncoder(config, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 1125, 22)))
    with no_grad():
        h = projector_forward(x, model.projector)
        logits = model(x)
    assert h.shape == (2, 22, 32)
    assert logits.shape == (2, 4)
    _ok(3, "shapes [B,1,1125,22] -> [B,22,32] -> [B,4], pooled length 22")


def test_criterion_4_normalization_properties():
    rng = np.random.default_rng(2)
    # RMSNorm positive-scale equivariance at eps=1e-12, tol 1e-9
    layer = RmsNormLayer(8, eps=1e-12)
    for alpha in (0.1, 0.5, 2.0, 17.0, 100.0):
        x = rng.standard_normal(8) + np.sign(rng.standard_normal(8)) * 0.5
        diff = np.abs(rms_norm(Tensor(alpha * x), layer).data - rms_norm(Tensor(x), layer).data)
        assert diff.max() < 1e-9
    # softmax rows sum to 1 within 1e-12, masked entries excluded by underflow
    scores = rng.standard_normal((5, 9, 9)) * 4 + np.triu(np.full((9, 9), -1e30), k=1)
    sums = softmax(Tensor(scores), axis=-1).data.sum(axis=-1)
    assert np.max(np.abs(sums - 1.0)) < 1e-12
    # standard scaler pooled per-channel stats within 1e-9 of (0, 1)
    trials = TrialSet([Trial(rng.standard_normal((6, 400)) * 3 + 1, i % 4) for i in range(10)])
    scaled = apply_scaler(trials, fit_scaler(trials)).signals()
    assert np.max(np.abs(scaled.mean(axis=(0, 2)))) < 1e-9
    assert np.max(np.abs(scaled.std(axis=(0, 2)) - 1.0)) < 1e-9
    _ok(4, "RMSNorm equivariance 1e-9, softmax rows 1e-12, scaler (0,1) 1e-9")


def test_criterion_5_kappa_metric_identity():
    rng = np.random.default_rng(3)
    # balanced labels with uniform predicted marginals: kappa == (acc - 1/4) / (3/4)
    for _ in range(50):
        m = int(rng.integers(5, 60))
        labels = np.repeat(np.arange(4), m)
        preds = np.repeat(np.arange(4), m)
        rng.shuffle(preds)
        confusion = np.zeros((4, 4), dtype=np.int64)
        np.add.at(confusion, (labels, preds), 1)
        acc = np.trace(confusion) / confusion.sum()
        assert kappa_from_confusion(confusion) == pytest.approx((acc - 0.25) / 0.75, abs=1e-6)

    # reproduce the reported pair (0.8646 -> 0.8194)
    confusion = np.array([[63, 3, 3, 3], [3, 62, 4, 3], [3, 3, 62, 4], [3, 4, 3, 62]])
    acc = np.trace(confusion) / confusion.sum()
    kappa = kappa_from_confusion(confusion)
    assert round(100 * acc, 2) == 86.46
    assert round(100 * kappa, 2) == 81.94
    assert kappa == pytest.approx((acc - 0.25) / 0.75, abs=1e-6)

    # brute-force oracle agreement on 1,000 random confusion matrices
    checked = 0
    while checked < 1000:
        c = rng.integers(0, 25, size=(4, 4)).astype(np.float64)
        n = c.sum()
        if n == 0:
            continue
        p_e = (c.sum(axis=1) / n) @ (c.sum(axis=0) / n)
        if p_e >= 1.0:
            continue
        oracle = (np.trace(c) / n - p_e) / (1.0 - p_e)
        assert kappa_from_confusion(c) == pytest.approx(oracle, abs=1e-12)
        checked += 1
    _ok(5, "kappa identity (acc-0.25)/0.75, pair 86.46->81.94, 1000-case oracle")


def test_criterion_6_learning_capability():
    trials = synth_trials(64, seed=11, difficulty=0.0)
    scaler = fit_scaler(trials)
    scaled = apply_scaler(trials, scaler)
    model = EEGEncoder(ModelConfig(), np.random.default_rng([11, 0]))
    start = time.time()
    _, history = train(
        model,
        scaled,
        TrainConfig(epochs=200, seed=11),
        on_epoch=lambda stats: stats.train_acc >= 0.99,
    )
    elapsed = time.time() - start
    assert abs(history[0].loss - np.log(4.0)) <= 0.2, f"epoch-0 loss {history[0].loss:.4f}"
    best = max(h.train_acc for h in history)
    assert best >= 0.99, f"best train accuracy {best:.3f} after {len(history)} epochs"
    assert len(history) <= 200
    assert elapsed < 600.0, f"training took {elapsed:.0f}s"
    _ok(6, f"99% train acc at epoch {len(history) - 1} in {elapsed:.0f}s; loss0 {history[0].loss:.3f}")


@pytest.fixture(scope="module")
def synth_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("accept") / "synth.bin"
    assert main(["synth", "--n", "16", "--seed", "5", "--session", "both", "--out", str(path)]) == EXIT_OK
    return path


@pytest.mark.parametrize(
    "flags",
    [
        ["--no-transformer-path"],
        ["--branches", "1"],
        ["--branches", "3"],
        ["--branches", "5"],
        ["--branches", "7"],
        ["--branches", "9"],
        ["--layers", "2"],
        ["--layers", "4"],
        ["--layers", "8"],
        ["--vanilla-transformer"],
    ],
    ids=lambda f: " ".join(f),
)
def test_criterion_7_ablation_machinery(flags, tmp_path, synth_file):
    out = tmp_path / "run"
    code = main(
        ["train", "--data", str(synth_file), "--out", str(out), "--epochs", "1", "--seed", "2"] + flags
    )
    assert code == EXIT_OK, f"train failed for {flags}"
    code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(synth_file)])
    assert code == EXIT_OK, f"eval failed for {flags}"
    report = json.loads((out / "manifest.json").read_text())
    assert report["model_config"]["n_branches"] >= 1
    _ok(7, f"ablation {' '.join(flags)} trains and evaluates")


def test_criterion_8_persistence(tmp_path):
    # EEGTRIAL1 round trip is bit-exact at the file level
    trials = synth_trials(8, seed=6, difficulty=0.4)
    path_a, path_b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_trialset(path_a, trials)
    loaded = load_trialset(path_a)
    save_trialset(path_b, loaded)
    assert path_a.read_bytes() == path_b.read_bytes()

    # fixed-seed training runs are bit-identical, end to end
    def run(out_name):
        rng = np.random.default_rng(8)
        templates = rng.standard_normal((4, 3, 63))
        data = TrialSet([Trial(templates[i % 4] + 0.05 * rng.standard_normal((3, 63)), i % 4) for i in range(8)])
        scaler = fit_scaler(data)
        scaled = apply_scaler(data, scaler)
        model = EEGEncoder(ModelConfig.miniature(), np.random.default_rng([9, 0]))
        out = tmp_path / out_name
        out.mkdir()
        state, history = train(model, scaled, TrainConfig(epochs=3, batch_size=8, seed=9),
                               checkpoint_dir=out, scaler=scaler)
        return out, [(h.loss, h.train_acc) for h in history], scaled

    out1, hist1, scaled = run("r1")
    out2, hist2, _ = run("r2")
    assert hist1 == hist2
    assert (out1 / "checkpoint.bin").read_bytes() == (out2 / "checkpoint.bin").read_bytes()

    # checkpoint save -> load -> evaluate is bit-identical
    model, extras = load_checkpoint(out1 / "checkpoint.bin")
    model2, _ = load_checkpoint(out2 / "checkpoint.bin")
    report1 = evaluate(model, scaled)
    report2 = evaluate(model2, scaled)
    assert np.array_equal(report1.confusion, report2.confusion)
    assert report1.accuracy == report2.accuracy and report1.kappa == report2.kappa
    assert scaler_from_extras(extras) is not None
    _ok(8, "checkpoint/evaluate bit-identical; EEGTRIAL1 and seeded runs bit-exact")


def test_criterion_9_weight_decay_selectivity():
    from eegencoder.training import AdamState, adam_step

    model = EEGEncoder(ModelConfig(), np.random.default_rng(10))
    entries = model.parameter_entries()
    before = {name: t.data.copy() for name, t, _ in entries}
    for _, t, _ in entries:
        t.grad = np.zeros_like(t.data)
    config = TrainConfig(lr=0.001, mlp_weight_decay=0.5)
    adam_step(entries, AdamState(), config)
    factor = 1.0 - config.lr * config.mlp_weight_decay
    changed, unchanged = 0, 0
    for name, t, decayed in entries:
        if decayed:
            assert ".head_mlp." in name
            expected = before[name] * factor
            scale = np.maximum(np.abs(expected), 1e-300)
            assert np.max(np.abs(t.data - expected) / scale) < 1e-12, name
            changed += 1
        else:
            assert np.array_equal(t.data, before[name]), name
            unchanged += 1
    assert changed == 10  # 5 branches x (weight, bias)
    assert unchanged == len(entries) - 10
    _ok(9, f"zero-grad step changes exactly {changed} head tensors by (1 - lr*wd)")
