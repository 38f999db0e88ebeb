"""Adapter kernels: LoRA, IA3, prefix tuning, prompt tuning, sequential bottleneck.

Each kernel is a pure function of its parameters and inputs.  Gates are
per-example scalars in (0, 1) produced by :func:`gate_value`; passing
``gate=None`` means ungated (a gate fixed at 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import ModelConfig, prompt_prepend  # noqa: F401  (re-exported kernel)
from .errors import ConfigError, DimensionError

KINDS = ("lora", "ia3", "prefix", "prompt", "seqbn")
LORA_TARGETS = ("query", "value")
IA3_TARGETS = ("key", "value", "ffn_inner")

_KIND_FIELDS = {
    "lora": ("r", "alpha", "targets"),
    "ia3": ("targets",),
    "prefix": ("prefix_length", "reparam_hidden"),
    "prompt": ("prompt_length",),
    "seqbn": ("reduction_factor",),
}


@dataclass(frozen=True)
class AdapterSpec:
    """Declarative settings for one adapter kernel.

    Only the fields relevant to ``kind`` are meaningful; the rest keep their
    defaults and are left out of serialisation.
    """

    kind: str
    r: int = 8
    alpha: float = 8.0
    targets: tuple[str, ...] = ()
    prefix_length: int = 10
    reparam_hidden: int = 512
    prompt_length: int = 10
    reduction_factor: int = 16
    use_gating: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}; expected one of {KINDS}")
        if not self.targets:
            default = {"lora": LORA_TARGETS, "ia3": IA3_TARGETS}.get(self.kind, ())
            object.__setattr__(self, "targets", default)
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.kind == "prompt":
            object.__setattr__(self, "use_gating", False)
        self._check()

    def _check(self) -> None:
        if self.kind == "lora":
            if self.r < 1:
                raise ConfigError("LoRA rank must be >= 1")
            if self.alpha <= 0:
                raise ConfigError("LoRA alpha must be positive")
            bad = set(self.targets) - set(LORA_TARGETS)
            if bad:
                raise ConfigError(f"LoRA targets must be drawn from {LORA_TARGETS}, got {sorted(bad)}")
        elif self.kind == "ia3":
            bad = set(self.targets) - set(IA3_TARGETS)
            if bad:
                raise ConfigError(f"IA3 targets must be drawn from {IA3_TARGETS}, got {sorted(bad)}")
        elif self.kind == "prefix":
            if self.prefix_length < 1 or self.reparam_hidden < 1:
                raise ConfigError("prefix_length and reparam_hidden must be >= 1")
        elif self.kind == "prompt":
            if self.prompt_length < 1:
                raise ConfigError("prompt_length must be >= 1")
        elif self.kind == "seqbn":
            if self.reduction_factor < 1:
                raise ConfigError("reduction_factor must be >= 1")

    def check_config(self, cfg: ModelConfig) -> None:
        """Raise ConfigError if this adapter cannot attach to ``cfg``."""
        if self.kind == "lora" and self.r > cfg.hidden:
            raise ConfigError(f"LoRA rank {self.r} exceeds hidden size {cfg.hidden}")
        if self.kind == "seqbn" and cfg.hidden % self.reduction_factor:
            raise ConfigError(
                f"reduction factor {self.reduction_factor} does not divide hidden size {cfg.hidden}")
        if self.kind == "prompt" and self.prompt_length >= cfg.max_length:
            raise ConfigError(f"prompt length {self.prompt_length} leaves no room in "
                              f"{cfg.max_length} positions")

    def to_dict(self) -> dict[str, str]:
        out = {"kind": self.kind}
        for name in _KIND_FIELDS[self.kind]:
            val = getattr(self, name)
            if name == "targets":
                val = ",".join(val)
            elif name == "alpha":
                val = repr(float(val))
            out[name] = str(val)
        out["use_gating"] = "true" if self.use_gating else "false"
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "AdapterSpec":
        d = dict(d)
        try:
            kind = d.pop("kind")
        except KeyError:
            raise ConfigError("adapter spec is missing 'kind'") from None
        if kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {KINDS}")
        allowed = set(_KIND_FIELDS[kind]) | {"use_gating"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"fields {sorted(extra)} do not apply to a {kind} adapter")
        kw: dict = {}
        for k, v in d.items():
            if k == "targets":
                kw[k] = tuple(t.strip() for t in v.split(",") if t.strip())
            elif k == "alpha":
                kw[k] = float(v)
            elif k == "use_gating":
                if v.lower() not in ("true", "false"):
                    raise ConfigError(f"use_gating must be true or false, got {v!r}")
                kw[k] = v.lower() == "true"
            else:
                kw[k] = int(v)
        return cls(kind, **kw)


# ---------------------------------------------------------------------------
# closed-form parameter counts


def gate_size(hidden: int) -> int:
    return hidden + 1


def gates_per_layer(spec: AdapterSpec) -> int:
    """Number of gates one layer of this adapter carries."""
    if not spec.use_gating or spec.kind == "prompt":
        return 0
    if spec.kind in ("lora", "ia3"):
        return len(spec.targets)
    return 1


def kernel_param_count(spec: AdapterSpec, cfg: ModelConfig) -> int:
    """Trainable scalars of the kernel itself, gates excluded."""
    h, f, n = cfg.hidden, cfg.ffn_inner, cfg.num_layers
    if spec.kind == "lora":
        return n * len(spec.targets) * 2 * spec.r * h
    if spec.kind == "ia3":
        widths = {"key": h, "value": h, "ffn_inner": f}
        return n * sum(widths[t] for t in spec.targets)
    if spec.kind == "prefix":
        p, r = spec.prefix_length, spec.reparam_hidden
        out = 2 * n * h
        return p * h + (h * r + r) + (r * out + out)
    if spec.kind == "prompt":
        return spec.prompt_length * h
    m = h // spec.reduction_factor
    return n * ((h * m + m) + (m * h + h))


def gate_param_count(spec: AdapterSpec, cfg: ModelConfig) -> int:
    return cfg.num_layers * gates_per_layer(spec) * gate_size(cfg.hidden)


# ---------------------------------------------------------------------------
# kernels


def _per_example(gate, like: Tensor):
    """Reshape a per-example gate [B] so it broadcasts over ``like``."""
    if gate is None:
        return None
    if isinstance(gate, (int, float)):
        return float(gate)
    return ag.reshape(gate, (gate.shape[0],) + (1,) * (like.ndim - 1))


def gate_value(x: Tensor, weight: Tensor, bias: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Sequence-level gate: ``sigmoid(mean over unmasked positions of x.w + b)``.

    ``x`` is ``[B x S x H]``; returns shape ``[B]``.
    """
    if weight.shape != (x.shape[-1],) or bias.size != 1:
        raise DimensionError(f"gate parameters {weight.shape}/{bias.shape} do not match "
                             f"hidden size {x.shape[-1]}")
    b, s = x.shape[0], x.shape[1]
    proj = ag.reshape(ag.matmul(x, ag.reshape(weight, (-1, 1))), (b, s))
    proj = proj + ag.reshape(bias, (1, 1))
    if mask is None:
        mask = np.ones((b, s))
    mask = np.asarray(mask, dtype=x.dtype)
    denom = np.maximum(mask.sum(axis=1), 1.0)
    pooled = ag.sum_(proj * mask, axis=1) / denom
    return ag.sigmoid(pooled)


def lora_apply(x: Tensor, base_out: Tensor, A: Tensor, B: Tensor, alpha: float, r: int,
               gate=None) -> Tensor:
    """``base_out + gate * (alpha / r) * (x A^T) B^T``."""
    h = x.shape[-1]
    if r > h:
        raise ConfigError(f"LoRA rank {r} exceeds hidden size {h}")
    if A.shape != (r, h) or B.shape[1] != r:
        raise DimensionError(f"LoRA factors A {A.shape} / B {B.shape} do not match r={r}, H={h}")
    delta = ag.matmul(ag.matmul(x, ag.swap_last(A)), ag.swap_last(B))
    delta = ag.scale(delta, alpha / r)
    g = _per_example(gate, delta)
    if g is not None:
        delta = delta * g
    return base_out + delta


def ia3_rescale(x: Tensor, vec: Tensor, gate=None) -> Tensor:
    """``vec * x`` ungated; gated: ``(1 - g) x + g (vec * x)``."""
    if vec.shape != (x.shape[-1],):
        raise DimensionError(f"IA3 vector {vec.shape} does not match width {x.shape[-1]}")
    g = _per_example(gate, x)
    if g is None:
        return x * vec
    # (1-g) x + g (l x) == x * (1 + g (l - 1))
    return x * (1.0 + g * (vec - 1.0))


def ia3_apply(keys: Tensor, values: Tensor, ffn_inner_acts: Tensor, l_k: Tensor, l_v: Tensor,
              l_ff: Tensor, gate=None):
    """Rescale keys, values and FFN inner activations.

    ``gate`` may be one gate for all three or a ``(g_k, g_v, g_ff)`` tuple.
    """
    if isinstance(gate, tuple):
        gk, gv, gf = gate
    else:
        gk = gv = gf = gate
    return (ia3_rescale(keys, l_k, gk), ia3_rescale(values, l_v, gv),
            ia3_rescale(ffn_inner_acts, l_ff, gf))


def prefix_expand(prefix_emb: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  num_layers: int) -> Tensor:
    """Reparameterise prefix rows into per-layer key/value prefixes.

    ``prefix_emb [P x H] -> tanh(. W1 + b1) W2 + b2 -> [L x 2 x P x H]``.
    """
    p, h = prefix_emb.shape
    if w2.shape[1] != 2 * num_layers * h:
        raise DimensionError(f"prefix output width {w2.shape[1]} != 2*L*H = {2 * num_layers * h}")
    hid = ag.tanh(ag.linear(prefix_emb, w1, b1))
    out = ag.linear(hid, w2, b2)
    return ag.transpose(ag.reshape(out, (p, num_layers, 2, h)), (1, 2, 0, 3))


def seqbn_apply(h: Tensor, down_w: Tensor, down_b: Tensor, up_w: Tensor, up_b: Tensor,
                gate=None) -> Tensor:
    """Residual bottleneck ``h + gate * up(gelu(down(h)))``."""
    width = h.shape[-1]
    if down_w.shape[0] != width or up_w.shape[1] != width:
        raise DimensionError(f"bottleneck weights {down_w.shape}/{up_w.shape} do not match {width}")
    delta = ag.linear(ag.gelu(ag.linear(h, down_w, down_b)), up_w, up_b)
    g = _per_example(gate, delta)
    if g is not None:
        delta = delta * g
    return h + delta


# ---------------------------------------------------------------------------
# parameter allocation


@dataclass
class AdapterParams:
    """Allocated tensors for one adapter member of one stack group."""

    spec: AdapterSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def gate(self, layer: int, target: str) -> tuple[Tensor, Tensor]:
        return (self.tensors[f"gate.{layer}.{target}.weight"],
                self.tensors[f"gate.{layer}.{target}.bias"])


def _gate_targets(spec: AdapterSpec) -> tuple[str, ...]:
    if spec.kind in ("lora", "ia3"):
        return spec.targets
    return ("block",)


def allocate(spec: AdapterSpec, cfg: ModelConfig, rng: np.random.Generator) -> AdapterParams:
    """Create and initialise the tensors of one adapter.

    LoRA B, the bottleneck up-projection and biases start at zero and IA3
    vectors at one, so every kernel is the identity at initialisation.
    """
    spec.check_config(cfg)
    h, f, n = cfg.hidden, cfg.ffn_inner, cfg.num_layers
    dt = cfg.dtype
    t: dict[str, Tensor] = {}

    def normal(shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(dt)

    if spec.kind == "lora":
        for i in range(n):
            for tgt in spec.targets:
                t[f"{i}.{tgt}.A"] = Tensor(normal((spec.r, h)))
                t[f"{i}.{tgt}.B"] = Tensor(np.zeros((h, spec.r), dtype=dt))
    elif spec.kind == "ia3":
        widths = {"key": h, "value": h, "ffn_inner": f}
        for i in range(n):
            for tgt in spec.targets:
                t[f"{i}.{tgt}.scale"] = Tensor(np.ones(widths[tgt], dtype=dt))
    elif spec.kind == "prefix":
        p, r = spec.prefix_length, spec.reparam_hidden
        t["embedding"] = Tensor(normal((p, h)))
        t["mlp.w1"] = Tensor(normal((h, r)))
        t["mlp.b1"] = Tensor(np.zeros(r, dtype=dt))
        t["mlp.w2"] = Tensor(normal((r, 2 * n * h)))
        t["mlp.b2"] = Tensor(np.zeros(2 * n * h, dtype=dt))
    elif spec.kind == "prompt":
        t["embedding"] = Tensor(normal((spec.prompt_length, h)))
    else:
        m = h // spec.reduction_factor
        for i in range(n):
            t[f"{i}.down.weight"] = Tensor(normal((h, m)))
            t[f"{i}.down.bias"] = Tensor(np.zeros(m, dtype=dt))
            t[f"{i}.up.weight"] = Tensor(np.zeros((m, h), dtype=dt))
            t[f"{i}.up.bias"] = Tensor(np.zeros(h, dtype=dt))
    if spec.use_gating:
        for i in range(n):
            for tgt in _gate_targets(spec):
                t[f"gate.{i}.{tgt}.weight"] = Tensor(normal((h,)))
                t[f"gate.{i}.{tgt}.bias"] = Tensor(np.zeros(1, dtype=dt))
    return AdapterParams(spec, t)
