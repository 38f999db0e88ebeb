"""Dataset files, featurisation, and synthetic task generators.

File formats are UTF-8, tab-separated, one example per line, no header::

    records  text<TAB>label
    pairs    text_a<TAB>text_b<TAB>label
    spans    context<TAB>question<TAB>answer_start<TAB>answer_text
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CLS_ID, PAD_ID, SEP_ID, Batch, HashTokenizer
from .errors import InputError, ParseError

TASK_KINDS = ("single-class", "pair-class", "regression", "span")
FORMATS = {"records": 2, "pairs": 3, "spans": 4}


@dataclass(frozen=True)
class Span:
    start: int
    text: str


@dataclass(frozen=True)
class Example:
    texts: tuple[str, ...]
    target: int | float | Span


@dataclass
class Dataset:
    examples: list[Example]
    task_kind: str
    num_labels: int | None = None
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise InputError(f"unknown task kind {self.task_kind!r}")
        if not self.examples:
            raise InputError("dataset is empty")
        if self.task_kind in ("single-class", "pair-class"):
            labels = [e.target for e in self.examples]
            if any(not isinstance(t, (int, np.integer)) or t < 0 for t in labels):
                raise InputError("class targets must be non-negative integers")
            top = max(labels) + 1
            if self.num_labels is None:
                self.num_labels = max(top, 2)
            elif top > self.num_labels:
                raise InputError(f"label {top - 1} outside {self.num_labels} classes")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def format(self) -> str:
        if self.task_kind == "span":
            return "spans"
        return "pairs" if len(self.examples[0].texts) == 2 else "records"


def _default_kind(fmt: str) -> str:
    return {"records": "single-class", "pairs": "pair-class", "spans": "span"}[fmt]


def load_dataset(path, format: str = "records", task_kind: str | None = None,
                 label_names: Sequence[str] | None = None) -> Dataset:
    """Parse a dataset file; examples keep file order."""
    if format not in FORMATS:
        raise InputError(f"unknown dataset format {format!r}; expected one of {sorted(FORMATS)}")
    kind = task_kind or _default_kind(format)
    if format == "spans" and kind != "span" or format != "spans" and kind == "span":
        raise InputError(f"format {format!r} cannot hold a {kind!r} task")
    names = tuple(label_names) if label_names is not None else None
    lookup = {n: i for i, n in enumerate(names)} if names else None
    examples = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != FORMATS[format]:
                raise ParseError(f"expected {FORMATS[format]} tab-separated fields, got {len(parts)}",
                                 line=n, path=str(path))
            examples.append(_parse_fields(parts, format, kind, lookup, n, str(path)))
    if not examples:
        raise InputError(f"{path}: no examples")
    return Dataset(examples, kind, num_labels=len(names) if names else None, label_names=names)


def _parse_fields(parts, fmt, kind, lookup, n, path) -> Example:
    if fmt == "spans":
        context, question, start_s, answer = parts
        try:
            start = int(start_s)
        except ValueError:
            raise ParseError(f"answer_start {start_s!r} is not an integer", line=n, path=path) from None
        if start < 0 or start + len(answer) > len(context) or context[start:start + len(answer)] != answer:
            raise InputError(f"{path}:{n}: answer span [{start}, {start + len(answer)}) "
                             f"does not lie inside the context")
        return Example((context, question), Span(start, answer))
    texts, label = tuple(parts[:-1]), parts[-1].strip()
    if kind == "regression":
        try:
            return Example(texts, float(label))
        except ValueError:
            raise ParseError(f"regression target {label!r} is not a number", line=n, path=path) from None
    if lookup is not None:
        if label not in lookup:
            raise InputError(f"{path}:{n}: unknown label {label!r}")
        return Example(texts, lookup[label])
    if not label.isdigit():
        raise InputError(f"{path}:{n}: unknown label {label!r} (expected a class index)")
    return Example(texts, int(label))


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ds.examples:
            for t in ex.texts:
                if "\t" in t or "\n" in t:
                    raise InputError("texts may not contain tabs or newlines")
            if isinstance(ex.target, Span):
                fields = [ex.texts[0], ex.texts[1], str(ex.target.start), ex.target.text]
            elif ds.task_kind == "regression":
                fields = list(ex.texts) + [repr(float(ex.target))]
            elif ds.label_names:
                fields = list(ex.texts) + [ds.label_names[ex.target]]
            else:
                fields = list(ex.texts) + [str(ex.target)]
            fh.write("\t".join(fields) + "\n")


# ---------------------------------------------------------------------------
# featurisation

_WORD = re.compile(r"\S+")


@dataclass
class Features:
    """Token arrays for a whole dataset plus span bookkeeping."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    # spans only: per example, (token position -> (char start, char end)) of context tokens
    offsets: list[dict[int, tuple[int, int]]] = field(default_factory=list)
    contexts: list[str] = field(default_factory=list)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.ids[idx], self.mask[idx], self.labels[idx])

    def __len__(self) -> int:
        return self.ids.shape[0]


def featurize(ds: Dataset, tokenizer: HashTokenizer, length: int) -> Features:
    ids, masks, labels = [], [], []
    offsets, contexts = [], []
    for ex in ds.examples:
        if ds.task_kind == "span":
            i, m, lab, off = _span_features(ex, tokenizer, length)
            offsets.append(off)
            contexts.append(ex.texts[0])
        else:
            i, m = tokenizer.encode(ex.texts[0], ex.texts[1] if len(ex.texts) > 1 else None, length)
            lab = ex.target
        ids.append(i)
        masks.append(m)
        labels.append(lab)
    label_dtype = np.float64 if ds.task_kind == "regression" else np.int64
    return Features(np.array(ids, dtype=np.int64), np.array(masks, dtype=np.int64),
                    np.array(labels, dtype=label_dtype), offsets, contexts)


def _span_features(ex: Example, tok: HashTokenizer, length: int):
    context, question = ex.texts
    span: Span = ex.target
    ids = [CLS_ID] + tok.ids(question) + [SEP_ID, SEP_ID]
    offsets: dict[int, tuple[int, int]] = {}
    hits = []
    a0, a1 = span.start, span.start + len(span.text)
    for mt in _WORD.finditer(context):
        pos = len(ids)
        if pos >= length - 1:
            break
        offsets[pos] = (mt.start(), mt.end())
        if mt.start() < a1 and mt.end() > a0:
            hits.append(pos)
        ids.append(tok.token_id(mt.group()))
    ids = ids[:length - 1] + [SEP_ID]
    # answer truncated away (or empty): point at CLS
    start_tok, end_tok = (hits[0], hits[-1]) if hits else (0, 0)
    mask = [1] * len(ids) + [0] * (length - len(ids))
    ids = ids + [PAD_ID] * (length - len(ids))
    return ids, mask, (start_tok, end_tok), offsets


def decode_span(feat: Features, i: int, start: int, end: int) -> str:
    off = feat.offsets[i]
    if start not in off or end not in off or end < start:
        return ""
    return feat.contexts[i][off[start][0]:off[end][1]]


# ---------------------------------------------------------------------------
# synthetic tasks


def _words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def pattern_classification(n: int = 32, num_classes: int = 2, seed: int = 0,
                           min_len: int = 6, max_len: int = 12,
                           marker_share: float = 1.0) -> Dataset:
    """Balanced classes, each marked by tokens drawn from its own word set.

    A ``marker_share`` fraction of each example's tokens (at least one) comes
    from the class vocabulary; the rest is filler shared by all classes, so
    a bag-of-words classifier separates the classes exactly.
    """
    if not 0.0 < marker_share <= 1.0:
        raise InputError("marker_share must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    markers = [_words(f"c{c}w", 3) for c in range(num_classes)]
    filler = _words("f", 12)
    examples = []
    for i in range(n):
        c = i % num_classes
        size = int(rng.integers(min_len, max_len + 1))
        k = max(1, int(round(marker_share * size)))
        toks = list(rng.choice(filler, size - k)) + list(rng.choice(markers[c], k))
        rng.shuffle(toks)
        examples.append(Example((" ".join(toks),), c))
    return Dataset(examples, "single-class", num_labels=num_classes)


def rank_regression(n: int = 32, seed: int = 0) -> Dataset:
    """Target in [0, 5] equals the share of ``up`` tokens times five."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        size = int(rng.integers(4, 11))
        ups = int(rng.integers(0, size + 1))
        toks = ["up"] * ups + ["down"] * (size - ups)
        rng.shuffle(toks)
        examples.append(Example((" ".join(toks),), 5.0 * ups / size))
    return Dataset(examples, "regression")


def span_copy(n: int = 32, seed: int = 0) -> Dataset:
    """The answer is the word right after the ``key`` marker in the context."""
    rng = np.random.default_rng(seed)
    vocab = _words("w", 20)
    examples = []
    for _ in range(n):
        size = int(rng.integers(5, 10))
        toks = list(rng.choice(vocab, size))
        at = int(rng.integers(0, size - 1))
        toks[at] = "key"
        context = " ".join(toks)
        start = len(" ".join(toks[:at + 1])) + 1
        answer = toks[at + 1]
        examples.append(Example((context, "what follows key"), Span(start, answer)))
    return Dataset(examples, "span")
