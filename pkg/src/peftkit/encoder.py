"""RoBERTa-shaped transformer encoder built on :mod:`peftkit.autograd`.

Weights are randomly initialised; only the dimensions follow the base model.
Adapter kernels plug in through a hooks object (see :class:`NoHooks` for the
protocol) so the backbone itself never imports adapter code.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, InputError, UsageError

POSITION_OFFSET = 2
CLS_ID, PAD_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
NUM_RESERVED = 4

HEAD_KINDS = ("classification", "regression", "span")
# task heads start at zero so a fresh model predicts the uniform distribution
HEAD_INIT_STD = 0.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    hidden: int = 768
    num_heads: int = 12
    ffn_inner: int = 3072
    vocab_size: int = 50265
    max_positions: int = 514
    type_vocab: int = 1
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5
    precision: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden", "num_heads", "ffn_inner", "vocab_size",
                     "max_positions", "type_vocab"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden % self.num_heads:
            raise ConfigError(
                f"hidden size {self.hidden} is not divisible by {self.num_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")
        if self.max_positions <= POSITION_OFFSET:
            raise ConfigError(f"max_positions must exceed the position offset {POSITION_OFFSET}")
        if self.vocab_size <= NUM_RESERVED:
            raise ConfigError(f"vocab_size must exceed the {NUM_RESERVED} reserved ids")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def max_length(self) -> int:
        """Longest sequence (prompt included) the position table can address."""
        return self.max_positions - POSITION_OFFSET

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = float(v) if k in ("dropout", "layer_norm_eps", "init_std") else int(v)
        return cls(**kw)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


ROBERTA_BASE = ModelConfig()
TINY = ModelConfig(num_layers=2, hidden=16, num_heads=2, ffn_inner=32, vocab_size=100,
                   max_positions=64)

# training-sized shape: room for 128 tokens plus a 10-row prompt, and a
# variance-preserving init (std = hidden**-0.5) so the random frozen body
# still carries token identity through to the pooled features
TINY_TRAIN = TINY.replace(max_positions=160, init_std=0.25)

MODEL_PRESETS = {"roberta-base-shape": ROBERTA_BASE, "tiny": TINY, "tiny-train": TINY_TRAIN}


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None
    type_ids: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask)
        if self.ids.ndim != 2 or self.mask.shape != self.ids.shape:
            raise InputError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal [B x S]")
        if not np.isin(self.mask, (0, 1)).all():
            raise InputError("attention mask must be 0/1 valued")
        if self.type_ids is None:
            self.type_ids = np.zeros_like(self.ids)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.ids[idx], self.mask[idx],
                     None if self.labels is None else self.labels[idx],
                     self.type_ids[idx])


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    if std == 0:
        return np.zeros(shape)
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


class EncoderModel:
    """Backbone parameters plus an optional task head.

    ``params`` maps dotted names to tensors in a fixed creation order.  Head
    tensors live under ``head.`` and are excluded from :meth:`backbone_count`.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 head: str | None = None, num_labels: int = 0):
        self.config = config
        self.params = params
        self.head = head
        self.num_labels = num_labels

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head.")]

    def backbone_count(self) -> int:
        return sum(self.params[n].size for n in self.backbone_names())

    def head_count(self) -> int:
        return sum(self.params[n].size for n in self.head_names())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])


def _backbone_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every backbone tensor in creation order."""
    h, f = cfg.hidden, cfg.ffn_inner
    out = [
        ("embeddings.word", (cfg.vocab_size, h), "normal"),
        ("embeddings.position", (cfg.max_positions, h), "normal"),
        ("embeddings.token_type", (cfg.type_vocab, h), "normal"),
        ("embeddings.norm.gamma", (h,), "ones"),
        ("embeddings.norm.beta", (h,), "zeros"),
    ]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            out.append((p + f"attention.{proj}.weight", (h, h), "normal"))
            out.append((p + f"attention.{proj}.bias", (h,), "zeros"))
        out += [
            (p + "attention.norm.gamma", (h,), "ones"),
            (p + "attention.norm.beta", (h,), "zeros"),
            (p + "ffn.inner.weight", (h, f), "normal"),
            (p + "ffn.inner.bias", (f,), "zeros"),
            (p + "ffn.output.weight", (f, h), "normal"),
            (p + "ffn.output.bias", (h,), "zeros"),
            (p + "ffn.norm.gamma", (h,), "ones"),
            (p + "ffn.norm.beta", (h,), "zeros"),
        ]
    out += [("pooler.weight", (h, h), "normal"), ("pooler.bias", (h,), "zeros")]
    return out


def _head_shapes(cfg: ModelConfig, head: str | None, num_labels: int):
    h = cfg.hidden
    if head is None:
        return []
    if head == "classification":
        if num_labels < 2:
            raise ConfigError("a classification head needs at least 2 labels")
        return [("head.weight", (h, num_labels), "normal"), ("head.bias", (num_labels,), "zeros")]
    if head == "regression":
        return [("head.weight", (h, 1), "normal"), ("head.bias", (1,), "zeros")]
    if head == "span":
        return [("head.weight", (h, 2), "normal"), ("head.bias", (2,), "zeros")]
    raise ConfigError(f"unknown head {head!r}; expected one of {HEAD_KINDS}")


def _materialise(shapes, rng, dtype, std: float) -> dict[str, Tensor]:
    params = {}
    for name, shape, init in shapes:
        if init == "normal":
            data = _trunc_normal(rng, shape, std)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), name=name)
    return params


def init_model(config: ModelConfig, seed: int = 0, head: str | None = None,
               num_labels: int = 2) -> EncoderModel:
    """Deterministically initialise an encoder (and optional task head)."""
    config.validate()
    rng = np.random.default_rng(seed)
    if head == "regression":
        num_labels = 1
    elif head == "span":
        num_labels = 2
    elif head is None:
        num_labels = 0
    params = _materialise(_backbone_shapes(config), rng, config.dtype, config.init_std)
    # heads are fresh task layers, not part of the emulated pretrained body
    params.update(_materialise(_head_shapes(config, head, num_labels), rng, config.dtype,
                               HEAD_INIT_STD))
    return EncoderModel(config, params, head, num_labels)


# ---------------------------------------------------------------------------
# forward pass


class NoHooks:
    """Adapter hook protocol; every method here is the identity.

    ``gate`` arguments passed to hooks are sequence-level inputs: the tensor
    the hook point reads plus the attention mask used for pooling.
    """

    def prompt(self) -> Tensor | None:
        return None

    def query(self, layer: int, x: Tensor, out: Tensor, mask: np.ndarray) -> Tensor:
        return out

    def key(self, layer: int, x: Tensor, out: Tensor, mask: np.ndarray) -> Tensor:
        return out

    def value(self, layer: int, x: Tensor, out: Tensor, mask: np.ndarray) -> Tensor:
        return out

    def prefixes(self, layer: int, x: Tensor, mask: np.ndarray):
        """Return a list of ``(keys [P x H], values [P x H], gate [B])``."""
        return []

    def ffn_inner(self, layer: int, x: Tensor, acts: Tensor, mask: np.ndarray) -> Tensor:
        return acts

    def after_ffn(self, layer: int, h: Tensor, mask: np.ndarray) -> Tensor:
        return h


_NO_HOOKS = NoHooks()


def _resolve(model):
    """Split an adapted or bare model into (backbone model, hooks)."""
    base = getattr(model, "base", model)
    if not isinstance(base, EncoderModel):
        raise UsageError(f"expected an encoder model, got {type(model).__name__}")
    hooks = model.adapter_hooks() if hasattr(model, "adapter_hooks") else _NO_HOOKS
    return base, hooks


def _check_batch(cfg: ModelConfig, batch: Batch, prompt_len: int) -> None:
    if batch.ids.size and batch.ids.max() >= cfg.vocab_size:
        raise InputError(f"token id {int(batch.ids.max())} >= vocab size {cfg.vocab_size}")
    if batch.ids.size and batch.ids.min() < 0:
        raise InputError("token ids must be non-negative")
    s = batch.ids.shape[1] + prompt_len
    if s > cfg.max_length:
        raise InputError(f"sequence length {s} (prompt {prompt_len}) exceeds "
                         f"{cfg.max_length} addressable positions")
    if batch.type_ids.size and batch.type_ids.max() >= cfg.type_vocab:
        raise InputError("token type id out of range")


def _split_heads(x: Tensor, b: int, s: int, n: int, d: int) -> Tensor:
    return ag.transpose(ag.reshape(x, (b, s, n, d)), (0, 2, 1, 3))


def encode(model, batch: Batch, mode: str = "eval", rng: np.random.Generator | None = None,
           ) -> Tensor:
    """Hidden states ``[B x S x H]`` for the real (non-prompt) positions."""
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    m, hooks = _resolve(model)
    cfg = m.config
    p = m.params
    train = mode == "train"
    if train and cfg.dropout > 0 and rng is None:
        raise UsageError("train mode needs a random generator for dropout")
    prompt = hooks.prompt()
    plen = 0 if prompt is None else prompt.shape[0]
    _check_batch(cfg, batch, plen)

    b, s_real = batch.ids.shape
    h, nh, hd = cfg.hidden, cfg.num_heads, cfg.head_dim
    dt = cfg.dtype

    x = ag.take_rows(p["embeddings.word"], batch.ids)
    mask = batch.mask.astype(dt)
    if plen:
        x = prompt_prepend(x, prompt)
        mask = np.concatenate([np.ones((b, plen), dtype=dt), mask], axis=1)
    s = s_real + plen
    pos = ag.take_rows(p["embeddings.position"], np.arange(s) + POSITION_OFFSET)
    types = batch.type_ids
    if plen:
        types = np.concatenate([np.zeros((b, plen), dtype=types.dtype), types], axis=1)
    x = x + pos + ag.take_rows(p["embeddings.token_type"], types)
    x = ag.layer_norm(x, p["embeddings.norm.gamma"], p["embeddings.norm.beta"], cfg.layer_norm_eps)
    x = ag.dropout(x, cfg.dropout, rng, train)

    key_mask = mask[:, None, None, :]
    inv_sqrt = 1.0 / np.sqrt(hd)
    for i in range(cfg.num_layers):
        lp = f"layers.{i}."
        q = ag.linear(x, p[lp + "attention.query.weight"], p[lp + "attention.query.bias"])
        k = ag.linear(x, p[lp + "attention.key.weight"], p[lp + "attention.key.bias"])
        v = ag.linear(x, p[lp + "attention.value.weight"], p[lp + "attention.value.bias"])
        q = hooks.query(i, x, q, mask)
        k = hooks.key(i, x, k, mask)
        v = hooks.value(i, x, v, mask)
        qh = _split_heads(q, b, s, nh, hd)
        kh = _split_heads(k, b, s, nh, hd)
        vh = _split_heads(v, b, s, nh, hd)

        weights: Tensor | np.ndarray = key_mask
        prefix_blocks = hooks.prefixes(i, x, mask)
        if prefix_blocks:
            ks, vs, ws = [], [], []
            for pk, pv, gate in prefix_blocks:
                plen_i = pk.shape[0]
                ks.append(ag.broadcast_to(_split_heads(ag.reshape(pk, (1, plen_i, h)), 1, plen_i, nh, hd),
                                          (b, nh, plen_i, hd)))
                vs.append(ag.broadcast_to(_split_heads(ag.reshape(pv, (1, plen_i, h)), 1, plen_i, nh, hd),
                                          (b, nh, plen_i, hd)))
                ws.append(ag.broadcast_to(ag.reshape(gate, (b, 1, 1, 1)), (b, 1, 1, plen_i)))
            kh = ag.concat(ks + [kh], axis=2)
            vh = ag.concat(vs + [vh], axis=2)
            weights = ag.concat(ws + [Tensor(key_mask)], axis=3)
        scores = ag.scale(ag.matmul(qh, ag.swap_last(kh)), inv_sqrt)
        probs = ag.weighted_softmax(scores, weights)
        probs = ag.dropout(probs, cfg.dropout, rng, train)
        ctx = ag.reshape(ag.transpose(ag.matmul(probs, vh), (0, 2, 1, 3)), (b, s, h))
        attn = ag.linear(ctx, p[lp + "attention.output.weight"], p[lp + "attention.output.bias"])
        attn = ag.dropout(attn, cfg.dropout, rng, train)
        x1 = ag.layer_norm(attn + x, p[lp + "attention.norm.gamma"], p[lp + "attention.norm.beta"],
                           cfg.layer_norm_eps)

        inner = ag.gelu(ag.linear(x1, p[lp + "ffn.inner.weight"], p[lp + "ffn.inner.bias"]))
        inner = hooks.ffn_inner(i, x1, inner, mask)
        out = ag.linear(inner, p[lp + "ffn.output.weight"], p[lp + "ffn.output.bias"])
        out = ag.dropout(out, cfg.dropout, rng, train)
        out = hooks.after_ffn(i, out, mask)
        x = ag.layer_norm(out + x1, p[lp + "ffn.norm.gamma"], p[lp + "ffn.norm.beta"],
                          cfg.layer_norm_eps)

    if plen:
        x = x[:, plen:, :]
    return x


def prompt_prepend(embeddings: Tensor, prompt: Tensor, mask: np.ndarray | None = None):
    """Prepend prompt rows to every sequence in the batch.

    With ``mask`` given, returns ``(embeddings, extended_mask)`` where the
    prompt columns are always attendable; otherwise only the embeddings.
    """
    b, s, h = embeddings.shape
    plen = prompt.shape[0]
    if prompt.ndim != 2 or (plen and prompt.shape[1] != h):
        raise DimensionError(f"prompt {prompt.shape} does not match hidden size {h}")
    if plen == 0:
        out = embeddings
    else:
        rows = ag.broadcast_to(ag.reshape(prompt, (1, plen, h)), (b, plen, h))
        out = ag.concat([rows, embeddings], axis=1)
    if mask is None:
        return out
    mask = np.asarray(mask)
    ext = np.concatenate([np.ones((b, plen), dtype=mask.dtype), mask], axis=1)
    return out, ext


def _require_head(m: EncoderModel, kinds: tuple[str, ...]) -> None:
    if m.head not in kinds:
        raise UsageError(f"model has head {m.head!r}; this operation needs {' or '.join(kinds)}")


def pooled(model, batch: Batch, mode: str = "eval", rng=None) -> Tensor:
    m, _ = _resolve(model)
    hs = encode(model, batch, mode, rng)
    first = hs[:, 0, :]
    return ag.tanh(ag.linear(first, m.params["pooler.weight"], m.params["pooler.bias"]))


def classify(model, batch: Batch, mode: str = "eval", rng=None) -> Tensor:
    """Logits ``[B x C]`` from the pooled first real position."""
    m, _ = _resolve(model)
    _require_head(m, ("classification",))
    return ag.linear(pooled(model, batch, mode, rng), m.params["head.weight"], m.params["head.bias"])


def regress(model, batch: Batch, mode: str = "eval", rng=None) -> Tensor:
    """One real-valued score per example, shape ``[B]``."""
    m, _ = _resolve(model)
    _require_head(m, ("regression",))
    out = ag.linear(pooled(model, batch, mode, rng), m.params["head.weight"], m.params["head.bias"])
    return ag.reshape(out, (batch.size,))


def span_predict(model, batch: Batch, mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    """Start and end logits ``[B x S]``; masked positions are ``-inf``."""
    m, _ = _resolve(model)
    _require_head(m, ("span",))
    hs = encode(model, batch, mode, rng)
    logits = ag.linear(hs, m.params["head.weight"], m.params["head.bias"])
    masked = batch.mask == 0
    start = ag.masked_fill(logits[:, :, 0], masked, -np.inf)
    end = ag.masked_fill(logits[:, :, 1], masked, -np.inf)
    return start, end


# ---------------------------------------------------------------------------
# toy tokenizer


@dataclass
class HashTokenizer:
    """Whitespace split, then a stable hash into the non-reserved id range."""

    vocab_size: int
    lowercase: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def token_id(self, token: str) -> int:
        if self.lowercase:
            token = token.lower()
        tid = self._cache.get(token)
        if tid is None:
            tid = NUM_RESERVED + zlib.crc32(token.encode("utf-8")) % (self.vocab_size - NUM_RESERVED)
            self._cache[token] = tid
        return tid

    def ids(self, text: str) -> list[int]:
        return [self.token_id(t) for t in text.split()]

    def encode(self, text: str, pair: str | None = None, length: int = 128):
        """Return ``(ids, mask)`` lists truncated/right-padded to ``length``."""
        ids = [CLS_ID] + self.ids(text) + [SEP_ID]
        if pair is not None:
            ids += [SEP_ID] + self.ids(pair) + [SEP_ID]
        ids = ids[:length]
        mask = [1] * len(ids)
        pad = length - len(ids)
        return ids + [PAD_ID] * pad, mask + [0] * pad
