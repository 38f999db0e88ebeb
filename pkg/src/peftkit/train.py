"""Training loop, early stopping and evaluation.

The loop follows the UniPELT recipe: batch 16, inputs padded/truncated to
128 tokens, up to 50 epochs, early stopping once the dev score has gone 10
epochs without beating its best, learning rate picked from {2e-4, 5e-4}.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import metrics as mt
from .composition import AdaptedModel, trainable_parameters
from .data import Dataset, Features, decode_span, featurize
from .encoder import HashTokenizer, classify, regress, span_predict
from .errors import InputError, TrainingError, UsageError


@dataclass
class TrainConfig:
    batch_size: int = 16
    input_length: int = 128
    max_epochs: int = 50
    patience: int | None = 10
    learning_rate: float = 5e-4
    dropout: float = 0.1
    seed: int = 0
    lr_grid: tuple[float, ...] = (2e-4, 5e-4)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    metric: str | None = None
    track_train: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.input_length < 2 or self.max_epochs < 1:
            raise UsageError("batch_size, input_length and max_epochs must be positive")
        if self.patience is not None and self.patience < 1:
            raise UsageError("patience must be >= 1 (or None to disable early stopping)")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")
        self.lr_grid = tuple(float(x) for x in self.lr_grid)
        self.betas = tuple(float(x) for x in self.betas)

    def to_dict(self) -> dict[str, str]:
        d = asdict(self)
        out = {}
        for k, v in d.items():
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif v is None:
                v = "none"
            out[k] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        kw: dict = {}
        for k, v in d.items():
            if k in ("batch_size", "input_length", "max_epochs", "seed"):
                kw[k] = int(v)
            elif k == "patience":
                kw[k] = None if v.lower() in ("none", "inf", "") else int(v)
            elif k in ("learning_rate", "dropout", "eps", "weight_decay"):
                kw[k] = float(v)
            elif k in ("lr_grid", "betas"):
                kw[k] = tuple(float(x) for x in v.split(",") if x.strip())
            elif k == "metric":
                kw[k] = None if v.lower() in ("none", "") else v
            elif k == "track_train":
                kw[k] = v.lower() == "true"
            else:
                raise UsageError(f"unknown train config key {k!r}")
        return cls(**kw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float
    train_metric: float | None
    elapsed: float

    def line(self) -> str:
        tm = "nan" if self.train_metric is None else repr(self.train_metric)
        return (f"epoch={self.epoch}\ttrain_loss={self.train_loss!r}\ttrain_metric={tm}"
                f"\tdev_metric={self.dev_metric!r}\telapsed={self.elapsed:.3f}")


@dataclass
class MetricReport:
    metrics: dict[str, float]
    best_epoch: int | None = None
    history: list[float] = field(default_factory=list)
    log: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int | None = None
    learning_rate: float | None = None
    flags: dict[str, str] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"{k}={v!r}" for k, v in sorted(self.metrics.items())]
        if self.best_epoch is not None:
            out.append(f"best_epoch={self.best_epoch}")
        if self.stopped_epoch is not None:
            out.append(f"stopped_epoch={self.stopped_epoch}")
        if self.learning_rate is not None:
            out.append(f"learning_rate={self.learning_rate!r}")
        out += [f"flag.{k}={v}" for k, v in sorted(self.flags.items())]
        return out


class AdamW:
    """Adam with decoupled weight decay, updating tensors in place."""

    def __init__(self, params: Sequence[ag.Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # per-tensor step counts: a tensor without a gradient keeps its bias correction
        self.t = [0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, (p, m, v) in enumerate(zip(self.params, self.m, self.v)):
            if p.grad is None:
                continue
            self.t[i] += 1
            c1 = 1.0 - self.b1 ** self.t[i]
            c2 = 1.0 - self.b2 ** self.t[i]
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def early_stop_check(history: Sequence[float], patience: int | None) -> tuple[bool, int]:
    """``(stop, best_index)``; best is the earliest maximum of ``history``."""
    if not history:
        raise UsageError("early stopping needs at least one score")
    best = int(np.argmax(np.asarray(history, dtype=np.float64)))
    if patience is None:
        return False, best
    return (len(history) - 1 - best) >= patience, best


# ---------------------------------------------------------------------------
# task plumbing

_TASK_HEAD = {"single-class": "classification", "pair-class": "classification",
              "regression": "regression", "span": "span"}
_DEFAULT_METRIC = {"single-class": "accuracy", "pair-class": "accuracy",
                   "regression": "spearman", "span": "squad_f1"}
_TASK_METRICS = {"classification": mt.CLASSIFICATION_METRICS,
                 "regression": mt.REGRESSION_METRICS, "span": mt.SPAN_METRICS}


def _check_task(model, ds: Dataset) -> None:
    need = _TASK_HEAD[ds.task_kind]
    if model.head != need:
        raise UsageError(f"model head {model.head!r} cannot serve a {ds.task_kind} task")
    if need == "classification" and ds.num_labels > model.num_labels:
        raise UsageError(f"dataset has {ds.num_labels} classes, head has {model.num_labels}")


def task_loss(model, feat: Features, idx, mode: str, rng) -> ag.Tensor:
    batch = feat.batch(idx)
    if model.head == "classification":
        return ag.softmax_cross_entropy(classify(model, batch, mode, rng), batch.labels)
    if model.head == "regression":
        diff = regress(model, batch, mode, rng) - ag.Tensor(batch.labels)
        return ag.mean(ag.square(diff))
    start, end = span_predict(model, batch, mode, rng)
    labels = batch.labels
    return ag.scale(ag.softmax_cross_entropy(start, labels[:, 0])
                    + ag.softmax_cross_entropy(end, labels[:, 1]), 0.5)


def predict(model, feat: Features, batch_size: int = 64):
    """Eval-mode predictions: class ids, real scores, or (start, end) pairs."""
    out = []
    with ag.no_grad():
        for lo in range(0, len(feat), batch_size):
            batch = feat.batch(np.arange(lo, min(lo + batch_size, len(feat))))
            if model.head == "classification":
                out.append(classify(model, batch).data.argmax(axis=1))
            elif model.head == "regression":
                out.append(regress(model, batch).data.copy())
            else:
                s, e = span_predict(model, batch)
                out.append(_best_spans(s.data, e.data))
    return np.concatenate(out)


def _best_spans(start: np.ndarray, end: np.ndarray, max_len: int = 30) -> np.ndarray:
    """Highest start+end score with ``start <= end < start + max_len``."""
    s = start[:, :, None] + end[:, None, :]
    n = start.shape[1]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ok = (j >= i) & (j < i + max_len)
    s = np.where(ok[None], s, -np.inf)
    flat = s.reshape(s.shape[0], -1).argmax(axis=1)
    return np.stack([flat // n, flat % n], axis=1)


def compute_metrics(ds: Dataset, feat: Features, preds, names: Sequence[str]) -> tuple[dict, dict]:
    golds = feat.labels
    values, flags = {}, {}
    for name in names:
        if name == "accuracy":
            values[name] = mt.accuracy(preds, golds)
        elif name == "f1":
            values[name] = mt.f1_scores(preds, golds, "binary")
        elif name == "f1_micro":
            values[name] = mt.f1_scores(preds, golds, "micro", ds.num_labels)
        elif name == "f1_macro":
            values[name] = mt.f1_scores(preds, golds, "macro", ds.num_labels)
        elif name == "mcc":
            values[name] = mt.matthews_corr(preds, golds)
        elif name == "spearman":
            rho, ok = mt.spearman_with_flag(preds, golds)
            values[name] = rho
            if not ok:
                flags["spearman"] = "undefined (constant ranking)"
        elif name in ("squad_f1", "squad_em"):
            texts = [decode_span(feat, i, int(a), int(b)) for i, (a, b) in enumerate(preds)]
            gold_texts = [ex.target.text for ex in ds.examples]
            f1, em = mt.squad_scores(texts, gold_texts)
            values[name] = f1 if name == "squad_f1" else em
    return values, flags


def evaluate(model, data: Dataset, metrics: str | Sequence[str] | None = None,
             input_length: int = 128, feat: Features | None = None) -> MetricReport:
    """Deterministic eval-mode metrics for ``model`` on ``data``."""
    _check_task(model, data)
    if metrics is None:
        metrics = [_DEFAULT_METRIC[data.task_kind]]
    elif isinstance(metrics, str):
        metrics = [metrics]
    allowed = _TASK_METRICS[model.head]
    bad = [m for m in metrics if m not in allowed]
    if bad:
        raise UsageError(f"metrics {bad} do not apply to a {data.task_kind} task; "
                         f"choose from {allowed}")
    if feat is None:
        feat = featurize(data, HashTokenizer(model.config.vocab_size), input_length)
    values, flags = compute_metrics(data, feat, predict(model, feat), metrics)
    return MetricReport(values, flags=flags)


def _snapshot(params) -> list[np.ndarray]:
    return [t.data.copy() for _, t in params]


def _restore(params, snap) -> None:
    for (_, t), arr in zip(params, snap):
        t.data[...] = arr


def train(adapted: AdaptedModel, train_ds: Dataset, dev_ds: Dataset, cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[AdaptedModel, MetricReport]:
    """Optimise the trainable tensors of ``adapted``; returns it with best-epoch weights.

    The model's dropout is set to ``cfg.dropout`` for the run.
    """
    for ds in (train_ds, dev_ds):
        if ds is None or len(ds) == 0:
            raise InputError("training and dev datasets must be non-empty")
        _check_task(adapted, ds)
    metric = cfg.metric or _DEFAULT_METRIC[dev_ds.task_kind]
    if metric not in _TASK_METRICS[adapted.head]:
        raise UsageError(f"metric {metric!r} does not apply to a {dev_ds.task_kind} task")
    base = adapted.base
    base.config = base.config.replace(dropout=cfg.dropout)
    tok = HashTokenizer(base.config.vocab_size)
    ftrain = featurize(train_ds, tok, cfg.input_length)
    fdev = featurize(dev_ds, tok, cfg.input_length)
    params = trainable_parameters(adapted)
    opt = AdamW([t for _, t in params], cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    history: list[float] = []
    log: list[EpochRecord] = []
    best_snap = _snapshot(params)
    best_score = -math.inf
    stopped = None
    t0 = time.perf_counter()
    n = len(ftrain)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, lo in enumerate(range(0, n, cfg.batch_size), 1):
            idx = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            with ag.Tape() as tape:
                loss = task_loss(adapted, ftrain, idx, "train", rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", epoch, step)
            ag.backward(tape, loss)
            opt.step()
            losses.append(value)
        dev_score = compute_metrics(dev_ds, fdev, predict(adapted, fdev), [metric])[0][metric]
        train_score = None
        if cfg.track_train:
            train_score = compute_metrics(train_ds, ftrain, predict(adapted, ftrain), [metric])[0][metric]
        history.append(dev_score)
        rec = EpochRecord(epoch, float(np.mean(losses)), dev_score, train_score,
                          time.perf_counter() - t0)
        log.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if dev_score > best_score:
            best_score = dev_score
            best_snap = _snapshot(params)
        stop, _ = early_stop_check(history, cfg.patience)
        if stop:
            stopped = epoch
            break
    _restore(params, best_snap)
    _, best = early_stop_check(history, None)
    final = evaluate(adapted, dev_ds, [metric], cfg.input_length, feat=fdev)
    report = MetricReport(final.metrics, best_epoch=best + 1, history=history, log=log,
                          stopped_epoch=stopped, learning_rate=cfg.learning_rate,
                          flags=final.flags)
    return adapted, report


def train_with_grid(make_model: Callable[[], AdaptedModel], train_ds: Dataset, dev_ds: Dataset,
                    cfg: TrainConfig, on_epoch=None) -> tuple[AdaptedModel, MetricReport]:
    """Train one fresh model per learning rate in ``cfg.lr_grid``; keep the best dev score.

    Ties go to the earlier grid entry.
    """
    best = None
    for lr in cfg.lr_grid:
        run_cfg = TrainConfig(**{**asdict(cfg), "learning_rate": lr})
        model, report = train(make_model(), train_ds, dev_ds, run_cfg, on_epoch)
        score = max(report.history)
        if best is None or score > best[2]:
            best = (model, report, score)
    return best[0], best[1]
