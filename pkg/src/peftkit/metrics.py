"""Evaluation metrics: accuracy, F1 (binary/micro/macro), MCC, Spearman, SQuAD F1/EM."""
from __future__ import annotations

import re
import string
from collections import Counter
from typing import Sequence

import numpy as np

from .errors import InputError


def _pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(preds), np.asarray(golds)
    if p.shape != g.shape or p.ndim != 1:
        raise InputError(f"predictions {p.shape} and gold labels {g.shape} differ in length")
    return p, g


def accuracy(preds, golds) -> float:
    p, g = _pair(preds, golds)
    return float((p == g).mean()) if p.size else 0.0


def matthews_corr(preds, golds) -> float:
    """Binary MCC; 0 when any marginal of the confusion matrix is empty."""
    p, g = _pair(preds, golds)
    p, g = p.astype(bool), g.astype(bool)
    tp = int(np.sum(p & g))
    tn = int(np.sum(~p & ~g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / float(np.sqrt(float(denom)))


def _f1(tp: int, fp: int, fn: int) -> float:
    d = 2 * tp + fp + fn
    return 2.0 * tp / d if d else 0.0


def f1_scores(preds, golds, mode: str = "binary", num_classes: int | None = None,
              positive: int = 1) -> float:
    """F1 under ``mode`` in {binary, micro, macro}.

    Macro averages over ``range(num_classes)`` (inferred from the data when
    not given); a class absent from both predictions and gold scores 0.
    """
    p, g = _pair(preds, golds)
    if mode == "binary":
        tp = int(np.sum((p == positive) & (g == positive)))
        fp = int(np.sum((p == positive) & (g != positive)))
        fn = int(np.sum((p != positive) & (g == positive)))
        return _f1(tp, fp, fn)
    if num_classes is None:
        num_classes = int(max(p.max(initial=0), g.max(initial=0))) + 1
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    if mode == "micro":
        tp = int(np.sum(p == g))
        wrong = int(np.sum(p != g))
        return _f1(tp, wrong, wrong)
    if mode == "macro":
        scores = []
        for c in range(num_classes):
            tp = int(np.sum((p == c) & (g == c)))
            fp = int(np.sum((p == c) & (g != c)))
            fn = int(np.sum((p != c) & (g == c)))
            scores.append(_f1(tp, fp, fn))
        return float(np.mean(scores))
    raise InputError(f"unknown F1 mode {mode!r}; expected binary, micro or macro")


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_with_flag(preds, golds) -> tuple[float, bool]:
    """``(rho, defined)``; rho is reported as 0 when either ranking is constant."""
    p, g = _pair(np.asarray(preds, dtype=np.float64), np.asarray(golds, dtype=np.float64))
    if p.size < 2:
        raise InputError("Spearman correlation needs at least two points")
    rp = fractional_ranks(p) - (p.size + 1) / 2.0
    rg = fractional_ranks(g) - (g.size + 1) / 2.0
    denom = np.sqrt((rp * rp).sum() * (rg * rg).sum())
    if denom == 0:
        return 0.0, False
    return float((rp * rg).sum() / denom), True


def spearman_corr(preds, golds) -> float:
    return spearman_with_flag(preds, golds)[0]


_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def squad_example(pred: str, gold: str) -> tuple[float, float]:
    """Token-overlap F1 and exact match for one answer pair."""
    pt = normalize_answer(pred).split()
    gt = normalize_answer(gold).split()
    em = float(pt == gt)
    if not pt or not gt:
        return float(pt == gt), em
    common = Counter(pt) & Counter(gt)
    same = sum(common.values())
    if same == 0:
        return 0.0, em
    precision = same / len(pt)
    recall = same / len(gt)
    return 2 * precision * recall / (precision + recall), em


def squad_scores(pred_texts: Sequence[str], gold_texts: Sequence[str]) -> tuple[float, float]:
    """Mean (F1, EM) over examples."""
    if len(pred_texts) != len(gold_texts):
        raise InputError(f"{len(pred_texts)} predictions vs {len(gold_texts)} gold answers")
    if not pred_texts:
        return 0.0, 0.0
    pairs = [squad_example(p, g) for p, g in zip(pred_texts, gold_texts)]
    f1 = sum(a for a, _ in pairs) / len(pairs)
    em = sum(b for _, b in pairs) / len(pairs)
    return f1, em


CLASSIFICATION_METRICS = ("accuracy", "f1", "f1_micro", "f1_macro", "mcc")
REGRESSION_METRICS = ("spearman",)
SPAN_METRICS = ("squad_f1", "squad_em")
