"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines on the terminal.
"""

import contextlib
import json
import math
import time

import numpy as np
import pytest

from amrlab import tensor as T
from amrlab.amr import AttributionTarget, amr_loss, amr_step
from amrlab.attribution import compute_report
from amrlab.baselines import (
    StrategyConfig,
    modality_dropout_select,
    ogm_coefficients,
    umt_loss,
)
from amrlab.cli import main
from amrlab.data import SyntheticConfig, generate_synthetic
from amrlab.harness import TrainConfig, average_precision, mean_average_precision, train
from amrlab.model import ENCODER, ModelConfig, init_model
from amrlab.tensor import Tensor

from gradcheck import CASES, check_first_order, check_second_order


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except Exception:
        print(f"[acceptance {number}] FAIL {description}")
        raise
    print(f"[acceptance {number}] PASS {description}")


def random_small_model(seed, m=2, dim=5):
    return init_model(
        ModelConfig(
            modality_dims=(dim,) * m,
            encoding_dim=3,
            num_classes=3,
            encoder_hidden=(4,),
            classifier_hidden=(4,),
            init_seed=seed,
        )
    )


# the synthetic analogue of the dominance-correction experiment ------------------

EXPERIMENT_SEEDS = (1, 2, 3)


def _experiment_data(seed):
    return generate_synthetic(
        SyntheticConfig(
            num_classes=6,
            train_samples=3000,
            val_samples=600,
            modality_dims=(16, 16),
            signal_scales=(4.0, 1.0),
            noise_stds=(1.0, 1.0),
            seed=seed,
        )
    )


def _experiment_model_config(seed):
    return ModelConfig(
        modality_dims=(16, 16),
        encoding_dim=16,
        num_classes=6,
        encoder_hidden=(32,),
        classifier_hidden=(32,),
        init_seed=seed + 100,
    )


def _experiment_run(seed, kind, amr_on=False, modality=0):
    data = _experiment_data(seed)
    target = AttributionTarget(ratios=(1.0, 1.0), lam=1.0, lr=0.2) if amr_on else None
    config = TrainConfig(
        strategy=StrategyConfig(kind=kind, modality=modality, seed=seed),
        amr=target,
        epochs=6,
        batch_size=64,
        lr=0.05,
        momentum=0.9,
        seed=seed,
    )
    _, history = train(init_model(_experiment_model_config(seed)), data, config)
    return history[-1]


@pytest.fixture(scope="module")
def experiment_results():
    start = time.perf_counter()
    results = {}
    for seed in EXPERIMENT_SEEDS:
        results[seed] = {
            "naive": _experiment_run(seed, "naive"),
            "amr": _experiment_run(seed, "naive", amr_on=True),
            "unimodal0": _experiment_run(seed, "unimodal", modality=0),
            "unimodal1": _experiment_run(seed, "unimodal", modality=1),
        }
    results["elapsed"] = time.perf_counter() - start
    return results


# 1 -------------------------------------------------------------------------------


def test_criterion_1_autodiff_matches_finite_differences():
    with criterion(1, "autodiff first/second order vs finite differences"):
        start = time.perf_counter()
        for name, sampler in CASES.items():
            rng = np.random.default_rng(abs(hash(name)) % 2**32)
            for _ in range(50):
                check_first_order(sampler, rng, rtol=1e-4)
            for _ in range(10):
                check_second_order(sampler, rng, rtol=1e-3)
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"autodiff check took {elapsed:.1f}s"


# 2 -------------------------------------------------------------------------------


def test_criterion_2_attribution_invariants():
    with criterion(2, "attribution rows normalized; zero-weight modality scores 0"):
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        for trial in range(100):
            m = int(rng.integers(2, 4))
            dim = int(rng.integers(3, 7))
            model = init_model(
                ModelConfig(
                    modality_dims=(dim,) * m,
                    encoding_dim=int(rng.integers(2, 5)),
                    num_classes=int(rng.integers(2, 5)),
                    encoder_hidden=(int(rng.integers(3, 6)),),
                    init_seed=trial,
                )
            )
            batch = int(rng.integers(1, 9))
            inputs = [Tensor(rng.normal(size=(batch, dim))) for _ in range(m)]
            report = compute_report(model, inputs)
            assert np.all(np.abs(report.per_sample.sum(axis=1) - 1.0) <= 1e-9)
            assert np.all(report.per_sample >= 0.0) and np.all(report.per_sample <= 1.0)
            # cut one modality out of the fusion: its score must be exactly 0
            # wherever any other modality still attributes (all-zero rows fall
            # back to the uniform vector by design)
            cut = int(rng.integers(0, m))
            enc = model.config.encoding_dim
            model.fusion_w.data[cut * enc : (cut + 1) * enc, :] = 0.0
            cut_report = compute_report(model, inputs)
            live = cut_report.raw_pooled.sum(axis=1) > 0
            assert np.array_equal(
                cut_report.per_sample[live, cut], np.zeros(int(live.sum()))
            )
            assert np.all(cut_report.per_sample[~live] == 1.0 / m)
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0, f"attribution invariants took {elapsed:.1f}s"


# 3 -------------------------------------------------------------------------------


def test_criterion_3_regularizer_matches_hand_evaluation():
    with criterion(3, "regularizer equals direct L1 evaluation; zero iff matched; <= 2"):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            m = int(rng.integers(2, 7))
            a = rng.uniform(1e-6, 1.0, size=m)
            a /= a.sum()
            r = rng.uniform(0.05, 5.0, size=m)
            got = amr_loss(Tensor(a), AttributionTarget(ratios=tuple(r))).item()
            want = float(np.abs(a / a.sum() - r / r.sum()).sum())
            assert abs(got - want) < 1e-12
            assert 0.0 <= got <= 2.0
        for _ in range(100):
            m = int(rng.integers(2, 7))
            r = rng.uniform(0.05, 5.0, size=m)
            target = AttributionTarget(ratios=tuple(r))
            assert amr_loss(Tensor(r.copy()), target).item() == 0.0
            off = r / r.sum()
            off[0] += 1e-6
            off[1] -= 1e-6
            assert amr_loss(Tensor(off), target).item() > 0.0


# 4 -------------------------------------------------------------------------------


def test_criterion_4_encoder_isolation():
    with criterion(4, "1000 regularizer steps leave encoders bit-identical; lam=0 is naive"):
        rng = np.random.default_rng(4)
        target = AttributionTarget(ratios=(1.0, 1.0), lam=1.0, lr=0.05)
        for trial in range(1000):
            model = random_small_model(trial)
            inputs = [
                Tensor(rng.normal(size=(4, d))) for d in model.config.modality_dims
            ]
            before = [p.data.copy() for p in model.param_groups()[ENCODER]]
            amr_step(model, inputs, target)
            for b, p in zip(before, model.param_groups()[ENCODER]):
                assert np.array_equal(b, p.data)

        data = generate_synthetic(
            SyntheticConfig(
                num_classes=3,
                train_samples=160,
                val_samples=60,
                modality_dims=(6, 6),
                signal_scales=(2.0, 1.0),
                noise_stds=(1.0, 1.0),
                seed=40,
            )
        )
        model_cfg = ModelConfig(
            modality_dims=(6, 6),
            encoding_dim=4,
            num_classes=3,
            encoder_hidden=(6,),
            init_seed=41,
        )
        plain = TrainConfig(epochs=3, batch_size=32, seed=42)
        lam0 = TrainConfig(
            epochs=3,
            batch_size=32,
            seed=42,
            amr=AttributionTarget(ratios=(1.0, 1.0), lam=0.0),
        )
        model_a, _ = train(init_model(model_cfg), data, plain)
        model_b, _ = train(init_model(model_cfg), data, lam0)
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert np.array_equal(pa.data, pb.data)


# 5 -------------------------------------------------------------------------------


def test_criterion_5_dominance_correction(experiment_results):
    with criterion(5, "naive >= 70/30; with regularizer 50±5/50±5; accuracy within 3 points"):
        naive_dom = np.mean(
            [experiment_results[s]["naive"].dominance[0] for s in EXPERIMENT_SEEDS]
        )
        amr_dom = np.mean(
            [experiment_results[s]["amr"].dominance[0] for s in EXPERIMENT_SEEDS]
        )
        naive_acc = np.mean(
            [experiment_results[s]["naive"].accuracy for s in EXPERIMENT_SEEDS]
        )
        amr_acc = np.mean(
            [experiment_results[s]["amr"].accuracy for s in EXPERIMENT_SEEDS]
        )
        assert naive_dom >= 0.70, f"naive dominance {naive_dom:.3f} not >= 0.70"
        assert 0.45 <= amr_dom <= 0.55, f"regularized dominance {amr_dom:.3f} outside 50±5"
        assert abs(naive_acc - amr_acc) <= 0.03, (
            f"accuracy moved {abs(naive_acc - amr_acc) * 100:.1f} points"
        )
        assert experiment_results["elapsed"] < 60.0, (
            f"experiment took {experiment_results['elapsed']:.1f}s"
        )


# 6 -------------------------------------------------------------------------------


def test_criterion_6_unimodal_ordering(experiment_results):
    with criterion(6, "high-SNR unimodal beats low by >= 15 points; fusion beats both"):
        uni0 = np.mean(
            [experiment_results[s]["unimodal0"].accuracy for s in EXPERIMENT_SEEDS]
        )
        uni1 = np.mean(
            [experiment_results[s]["unimodal1"].accuracy for s in EXPERIMENT_SEEDS]
        )
        fusion = np.mean(
            [experiment_results[s]["naive"].accuracy for s in EXPERIMENT_SEEDS]
        )
        assert uni0 - uni1 >= 0.15, f"unimodal gap {uni0 - uni1:.3f} < 0.15"
        assert fusion > uni0, f"fusion {fusion:.4f} does not beat strong unimodal {uni0:.4f}"
        assert fusion > uni1, f"fusion {fusion:.4f} does not beat weak unimodal {uni1:.4f}"


# 7 -------------------------------------------------------------------------------


def brute_force_map(scores, labels):
    n, c = scores.shape
    aps = []
    for cls in range(c):
        if not any(labels[i] == cls for i in range(n)):
            continue
        order = sorted(range(n), key=lambda i: (-scores[i, cls], i))
        hits, precisions = 0, []
        for rank, i in enumerate(order, start=1):
            if labels[i] == cls:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
    return sum(aps) / len(aps)


def test_criterion_7_map_oracle():
    with criterion(7, "mAP equals brute-force rank recomputation; hand AP reproduced"):
        rng = np.random.default_rng(7)
        done = 0
        while done < 10:
            n = int(rng.integers(2, 9))
            c = int(rng.integers(2, 4))
            scores = np.round(rng.random((n, c)), 1)  # coarse values induce ties
            labels = rng.integers(0, c, size=n)
            got = mean_average_precision(scores, labels)
            want = brute_force_map(scores, labels)
            assert abs(got - want) < 1e-12
            done += 1
        hand = average_precision([0.9, 0.5, 0.1], [True, False, True])
        assert hand == (1.0 / 1.0 + 2.0 / 3.0) / 2.0


# 8 -------------------------------------------------------------------------------


def test_criterion_8_baseline_behavior():
    with criterion(8, "modality-dropout rate; distillation zero cases; modulation spot value"):
        # drop rate over 1e5 draws stays within ±1% of p (the never-empty
        # fallback moves it by p^2/M = 0.5% at p = 0.1, M = 2)
        p = 0.1
        rng = np.random.default_rng(8)
        drops = np.zeros(2)
        trials = 100_000
        for _ in range(trials):
            drops += ~modality_dropout_select(2, p, rng)
        rate = drops / trials
        assert np.all(np.abs(rate - p) < 0.01), f"drop rate {rate} vs p={p}"

        # matched logits: the distillation term vanishes exactly
        logits = np.random.default_rng(80).normal(size=(6, 4))
        labels = np.random.default_rng(81).integers(0, 4, size=6)
        matched = umt_loss(
            Tensor(logits), [Tensor(logits)], [logits], labels, tau=2.0, beta=1.0
        )
        plain = T.softmax_cross_entropy(Tensor(logits), labels)
        assert abs(matched.item() - plain.item()) < 1e-12

        # frozen teachers receive exactly zero gradient
        from amrlab.model import affine, unimodal_view

        model = random_small_model(88)
        teachers = [unimodal_view(model, m) for m in range(2)]
        rng = np.random.default_rng(82)
        inputs = [Tensor(rng.normal(size=(5, d))) for d in model.config.modality_dims]
        out = model.forward(inputs)
        with T.no_grad():
            teacher_logits = [
                t.forward([x]).logits.data for t, x in zip(teachers, inputs)
            ]
        heads = [
            (Tensor(rng.normal(size=(3, 3))), Tensor(np.zeros(3))) for _ in range(2)
        ]
        aux = [affine(e, w, b) for e, (w, b) in zip(out.encodings, heads)]
        loss = umt_loss(out.logits, aux, teacher_logits, rng.integers(0, 3, 5), 2.0, 1.0)
        grads = T.backward(loss, [p for t in teachers for p in t.parameters()])
        for g in grads:
            assert np.array_equal(g.data, np.zeros_like(g.data))

        # gradient-modulation coefficients: closed form
        k = ogm_coefficients([0.74, 0.26], 1.0)
        assert abs(k[0] - (1.0 - math.tanh(0.48))) < 1e-12
        assert k[1] == 1.0


# 9 -------------------------------------------------------------------------------


CONFIG_TEXT = """\
[data.synthetic]
num_classes = 4
train_samples = 160
val_samples = 80
modality_dims = [6, 6]
signal_scales = [3.0, 1.0]
noise_stds = [1.0, 1.0]
seed = 9

[model]
encoding_dim = 4
encoder_hidden = [8]
init_seed = 2

[train]
epochs = 2
batch_size = 32
lr = 0.05
seed = 3

[amr]
enabled = true
ratios = [1.0, 1.0]
lambda = 1.0
lr = 0.05

[output]
dir = "out"
"""


def test_criterion_9_commands_are_byte_deterministic(tmp_path):
    with criterion(9, "reruns produce byte-identical metrics JSON and checkpoints"):
        config = tmp_path / "exp.toml"
        config.write_text(CONFIG_TEXT)
        assert main(["train", "--config", str(config)]) == 0
        out = tmp_path / "out"
        first = {
            name: (out / name).read_bytes()
            for name in ("model.ckpt", "metrics.json", "history.csv")
        }
        assert main(["train", "--config", str(config)]) == 0
        for name, blob in first.items():
            assert (out / name).read_bytes() == blob, f"{name} changed across reruns"
        assert main(["generate", "--config", str(config)]) == 0
        gen_first = (out / "train.amrdata").read_bytes()
        assert main(["generate", "--config", str(config)]) == 0
        assert (out / "train.amrdata").read_bytes() == gen_first
