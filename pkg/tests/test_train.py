import math

import numpy as np
import pytest

from peftkit import autograd as ag
from peftkit import kvtext
from peftkit.composition import CompositionSpec, attach, build_preset, trainable_parameters
from peftkit.adapters import AdapterSpec
from peftkit.data import Dataset, Example, pattern_classification, rank_regression, span_copy
from peftkit.encoder import TINY, TINY_TRAIN, init_model
from peftkit.errors import InputError, TrainingError, UsageError
from peftkit.train import (AdamW, MetricReport, TrainConfig, early_stop_check, evaluate,
                           train, train_with_grid)

FAST = dict(batch_size=16, input_length=16, max_epochs=3, patience=10, dropout=0.1)


def adapted(preset="unipelt-paper", head="classification", cfg=TINY, seed=0, **kw):
    return attach(init_model(cfg, seed, head=head, **kw), build_preset(preset), seed + 1)


# ---- early stopping

@pytest.mark.parametrize("hist,patience,expected", [
    ([5], 10, (False, 0)),
    ([3, 2, 2, 2], 3, (True, 0)),
    ([3, 2, 2], 3, (False, 0)),
    ([1, 2, 3, 3], 1, (True, 2)),
    ([1, 1, 1], None, (False, 0)),
])
def test_early_stop_examples(hist, patience, expected):
    assert early_stop_check(hist, patience) == expected


def test_plateau_stops_at_thirteen():
    scores = [1, 2, 3] + [3] * 20
    stops = [i + 1 for i in range(len(scores)) if early_stop_check(scores[:i + 1], 10)[0]]
    assert stops[0] == 13
    assert early_stop_check(scores[:13], 10) == (True, 2)  # best epoch 3 (1-based)


def test_increasing_never_stops():
    h = list(range(100))
    assert not any(early_stop_check(h[:i], 1)[0] for i in range(1, 101))


def test_early_stop_empty():
    with pytest.raises(UsageError):
        early_stop_check([], 3)


# ---- optimizer

def textbook_adamw(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta)
        out.append(theta)
    return out


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_matches_scalar_oracle(wd):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(5)
    grads = rng.standard_normal((7, 5))
    p = ag.Tensor(x0.copy(), requires_grad=True)
    opt = AdamW([p], 1e-2, weight_decay=wd)
    traj = []
    for g in grads:
        p.grad = g.copy()
        opt.step()
        traj.append(p.data.copy())
    for j in range(5):
        ref = textbook_adamw(x0[j], grads[:, j], 1e-2, wd=wd)
        assert np.allclose([t[j] for t in traj], ref, rtol=0, atol=1e-14)


def test_adamw_skips_params_without_grad():
    p = ag.Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([p], 0.1)
    opt.step()
    assert np.array_equal(p.data, np.ones(3))
    p.grad = np.ones(3)
    opt.step()
    assert np.allclose(p.data, 1 - 0.1 / (1 + 1e-8))


# ---- config

def test_config_defaults_match_protocol():
    c = TrainConfig()
    assert (c.batch_size, c.input_length, c.max_epochs, c.patience, c.dropout) == (16, 128, 50, 10, 0.1)
    assert c.lr_grid == (2e-4, 5e-4) and c.betas == (0.9, 0.999) and c.eps == 1e-8
    assert c.weight_decay == 0.0


def test_config_text_round_trip():
    c = TrainConfig(patience=None, lr_grid=(1e-3,), metric="mcc", seed=7)
    assert TrainConfig.from_dict(kvtext.loads(kvtext.dumps(c.to_dict()))) == c
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"learning_rte": "1"})
    with pytest.raises(UsageError):
        TrainConfig(patience=0)


# ---- evaluation

def test_evaluate_perfect_and_constant():
    ds = pattern_classification(8, seed=0)
    model = adapted()
    w = model.base["head.weight"]
    # make the head ignore the input: always class 1
    model.base["head.bias"].data[...] = [0.0, 1.0]
    rep = evaluate(model, ds, ["accuracy", "mcc"], input_length=16)
    assert rep.metrics == {"accuracy": 0.5, "mcc": 0.0}
    assert not np.any(w.data)


def test_evaluate_is_deterministic_and_ignores_dropout():
    ds = pattern_classification(12, seed=2)
    model = adapted(cfg=TINY.replace(dropout=0.5))
    for t in model.adapter_params.values():
        t.data += 0.05
    model.base["head.weight"].data[...] = np.random.default_rng(0).standard_normal((16, 2))
    a = evaluate(model, ds, ["accuracy", "f1", "f1_macro"], 16)
    b = evaluate(model, ds, ["accuracy", "f1", "f1_macro"], 16)
    assert a.metrics == b.metrics


def test_evaluate_rejects_wrong_metric_and_head():
    ds = pattern_classification(8)
    with pytest.raises(UsageError):
        evaluate(adapted(), ds, "spearman", 16)
    with pytest.raises(UsageError):
        evaluate(adapted(head="span"), ds, None, 16)
    with pytest.raises(UsageError):
        evaluate(adapted(num_labels=2), pattern_classification(9, num_classes=3), None, 16)


def test_metric_report_lines():
    r = MetricReport({"mcc": 0.5, "accuracy": 1.0}, best_epoch=3, flags={"spearman": "x"})
    assert r.lines() == ["accuracy=1.0", "mcc=0.5", "best_epoch=3", "flag.spearman=x"]


# ---- training

def test_empty_dataset_rejected():
    ds = pattern_classification(8)
    with pytest.raises(InputError):
        train(adapted(), ds, None, TrainConfig(**FAST))
    with pytest.raises(InputError):
        Dataset([], "single-class")


def test_divergence_raises_training_error():
    model = adapted()
    next(iter(model.adapter_params.values())).data[...] = np.nan
    with pytest.raises(TrainingError) as err:
        train(model, pattern_classification(8), pattern_classification(8), TrainConfig(**FAST))
    assert err.value.epoch == 1 and err.value.step == 1


def test_only_trainable_tensors_change():
    model = adapted("pt-unipelt-paper")
    before = {n: t.data.copy() for n, t in model.named_parameters()}
    train(model, pattern_classification(16), pattern_classification(8, seed=1), TrainConfig(**FAST))
    trainable = {n for n, _ in trainable_parameters(model)}
    for name, t in model.named_parameters():
        if name in trainable:
            continue
        assert t.data.tobytes() == before[name].tobytes(), name
    assert any(not np.array_equal(t.data, before[n]) for n, t in trainable_parameters(model))


def test_same_seed_same_trajectory():
    runs = []
    for _ in range(2):
        _, rep = train(adapted(), pattern_classification(16), pattern_classification(8, seed=1),
                       TrainConfig(**FAST, seed=5))
        runs.append([(r.train_loss, r.dev_metric) for r in rep.log])
    assert runs[0] == runs[1]
    _, other = train(adapted(), pattern_classification(16), pattern_classification(8, seed=1),
                     TrainConfig(**FAST, seed=6))
    assert [r.train_loss for r in other.log] != [x for x, _ in runs[0]]


def test_best_epoch_restored():
    dev = pattern_classification(16, seed=9, marker_share=0.3)
    model, rep = train(adapted(cfg=TINY_TRAIN), pattern_classification(32, marker_share=0.3), dev,
                       TrainConfig(**{**FAST, "max_epochs": 8}, learning_rate=5e-4))
    assert rep.metrics["accuracy"] == max(rep.history)
    assert rep.history[rep.best_epoch - 1] == max(rep.history)
    assert rep.history.index(max(rep.history)) == rep.best_epoch - 1
    assert evaluate(model, dev, "accuracy", 16).metrics["accuracy"] == max(rep.history)


def test_patience_stops_early():
    ds = pattern_classification(16)
    _, rep = train(adapted(), ds, ds, TrainConfig(**{**FAST, "max_epochs": 20, "patience": 2},
                                                  learning_rate=1e-9))
    assert rep.stopped_epoch == 3 and len(rep.history) == 3 and rep.best_epoch == 1


def test_overfits_small_task():
    ds = pattern_classification(32)
    model, rep = train(adapted(cfg=TINY_TRAIN), ds, ds,
                       TrainConfig(input_length=16, learning_rate=5e-4, max_epochs=50))
    assert max(rep.history) == 1.0
    assert evaluate(model, ds, "accuracy", 16).metrics["accuracy"] == 1.0


def test_grid_keeps_best_learning_rate():
    ds = pattern_classification(16)
    cfg = TrainConfig(**FAST, lr_grid=(1e-9, 5e-3))
    _, rep = train_with_grid(lambda: adapted(cfg=TINY_TRAIN), ds, ds, cfg)
    assert rep.learning_rate in (1e-9, 5e-3)
    assert max(rep.history) >= 0.5


def test_regression_and_span_smoke():
    reg = rank_regression(16)
    _, rep = train(adapted(head="regression"), reg, reg, TrainConfig(**FAST))
    assert -1.0 <= rep.metrics["spearman"] <= 1.0 and len(rep.history) == 3
    spans = span_copy(16)
    _, rep = train(adapted(head="span", cfg=TINY), spans, spans,
                   TrainConfig(**{**FAST, "input_length": 24}, metric="squad_em"))
    assert 0.0 <= rep.metrics["squad_em"] <= 1.0


def test_spearman_flag_on_constant_predictions():
    reg = rank_regression(8)
    rep = evaluate(adapted(head="regression"), reg, "spearman", 16)
    assert rep.metrics["spearman"] == 0.0 and "spearman" in rep.flags


def test_dropout_is_taken_from_config():
    model = adapted()
    ds = pattern_classification(8)
    train(model, ds, ds, TrainConfig(**{**FAST, "max_epochs": 1, "dropout": 0.0}))
    assert model.base.config.dropout == 0.0
