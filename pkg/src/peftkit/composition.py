"""Named adapter compositions and their attachment to an encoder.

A composition is an ordered list of adapter members, optionally replicated
``stack_depth`` times per layer.  Each replica ("group") owns independent
parameters and gates; groups apply in order at every hook point, so the
output of group 1 feeds group 2.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import adapters as ak
from . import kvtext
from .adapters import AdapterParams, AdapterSpec
from .autograd import Tensor
from .encoder import EncoderModel, ModelConfig, NoHooks
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class CompositionSpec:
    name: str
    members: tuple[AdapterSpec, ...] = ()
    stack_depth: int = 1

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.stack_depth < 1:
            raise ConfigError("stack_depth must be >= 1")
        kinds = [m.kind for m in self.members]
        if kinds.count("prompt") > 1:
            raise ConfigError("a composition may hold at most one prompt member")
        if "prompt" in kinds and self.stack_depth > 1:
            raise ConfigError("prompt members cannot be stacked")
        dup = {k for k in kinds if kinds.count(k) > 1}
        if dup:
            raise ConfigError(f"repeated adapter kinds within one group: {sorted(dup)}")

    @property
    def prompt(self) -> AdapterSpec | None:
        return next((m for m in self.members if m.kind == "prompt"), None)

    @property
    def layer_members(self) -> tuple[AdapterSpec, ...]:
        """Members replicated per stack group (everything but the prompt)."""
        return tuple(m for m in self.members if m.kind != "prompt")

    def check_config(self, cfg: ModelConfig) -> None:
        for m in self.members:
            m.check_config(cfg)

    def to_dict(self) -> dict[str, str]:
        out = {"name": self.name, "stack_depth": str(self.stack_depth)}
        for i, m in enumerate(self.members):
            for k, v in m.to_dict().items():
                out[f"member.{i}.{k}"] = v
        return out

    def dumps(self) -> str:
        return kvtext.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "CompositionSpec":
        members: dict[int, dict[str, str]] = {}
        for k, v in d.items():
            if k.startswith("member."):
                _, idx, fld = k.split(".", 2)
                members.setdefault(int(idx), {})[fld] = v
            elif k not in ("name", "stack_depth"):
                raise ConfigError(f"unknown composition key {k!r}")
        specs = tuple(AdapterSpec.from_dict(members[i]) for i in sorted(members))
        return cls(d.get("name", "custom"), specs, int(d.get("stack_depth", "1")))


# ---------------------------------------------------------------------------
# presets


def _lora(alpha: float) -> AdapterSpec:
    return AdapterSpec("lora", r=8, alpha=alpha, use_gating=True)


_PREFIX = AdapterSpec("prefix", prefix_length=10, reparam_hidden=512, use_gating=True)
_SEQBN = AdapterSpec("seqbn", reduction_factor=16, use_gating=True)
_PROMPT = AdapterSpec("prompt", prompt_length=10, use_gating=False)
_IA3 = AdapterSpec("ia3", use_gating=True)

LIBRARY_ALPHA = 8.0
STATED_ALPHA = 2.0

PRESETS: dict[str, CompositionSpec] = {
    "unipelt-lib": CompositionSpec("unipelt-lib", (_lora(LIBRARY_ALPHA), _PREFIX, _SEQBN)),
    "unipelt-paper": CompositionSpec("unipelt-paper", (_lora(STATED_ALPHA), _PREFIX, _SEQBN)),
    "pt-unipelt-lib": CompositionSpec("pt-unipelt-lib",
                                      (_PROMPT, _lora(LIBRARY_ALPHA), _PREFIX, _SEQBN)),
    "pt-unipelt-paper": CompositionSpec("pt-unipelt-paper",
                                        (_PROMPT, _lora(STATED_ALPHA), _PREFIX, _SEQBN)),
    "ia3-prefix-seqbn": CompositionSpec("ia3-prefix-seqbn", (_IA3, _PREFIX, _SEQBN)),
    "unipelt-stack3": CompositionSpec("unipelt-stack3", (_lora(STATED_ALPHA), _PREFIX, _SEQBN),
                                      stack_depth=3),
}

PRESET_NAMES = tuple(PRESETS)


def build_preset(name: str) -> CompositionSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise UsageError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}") from None


# ---------------------------------------------------------------------------
# attachment


@dataclass
class FreezeMask:
    trainable: dict[str, bool] = field(default_factory=dict)

    def frozen_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if not t]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if t]


def component_of(name: str) -> str:
    """Census component for an adapter tensor name (``group1.lora.gates`` ...)."""
    parts = name.split(".")
    if parts[0] == "prompt":
        return "prompt"
    comp = ".".join(parts[:2])
    return comp + ".gates" if "gate" in parts[2:] else comp


class AdaptedModel:
    """An encoder with a composition attached and the base frozen.

    The backbone tensors are shared with the encoder passed to :func:`attach`
    (not copied); attaching flips their ``requires_grad`` off.
    """

    def __init__(self, base: EncoderModel, spec: CompositionSpec,
                 groups: list[list[AdapterParams]], prompt: AdapterParams | None):
        self.base = base
        self.spec = spec
        self.groups = groups
        self.prompt_params = prompt
        self.adapter_params: dict[str, Tensor] = {}
        if prompt is not None:
            for k, t in prompt.tensors.items():
                self.adapter_params[f"prompt.{k}"] = t
        for g, members in enumerate(groups, 1):
            for ap in members:
                for k, t in ap.tensors.items():
                    self.adapter_params[f"group{g}.{ap.spec.kind}.{k}"] = t
        for name, t in self.adapter_params.items():
            t.name = name
        mask = {n: False for n in base.backbone_names()}
        mask.update({n: True for n in base.head_names()})
        mask.update({n: True for n in self.adapter_params})
        self.freeze_mask = FreezeMask(mask)
        self._apply_mask()
        self._gate_override: tuple[float, frozenset[str] | None] | None = None
        self._bypass_prompt = False

    def _apply_mask(self) -> None:
        for name, t in self.named_parameters():
            t.requires_grad = self.freeze_mask.trainable[name]

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    @property
    def head(self) -> str | None:
        return self.base.head

    @property
    def num_labels(self) -> int:
        return self.base.num_labels

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.base.params)
        out.update(self.adapter_params)
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.base.params.items()
        yield from self.adapter_params.items()

    def adapter_count(self) -> int:
        return sum(t.size for t in self.adapter_params.values())

    def adapter_census(self) -> dict[str, int]:
        """Allocated adapter scalars per census component (brute-force count)."""
        out: dict[str, int] = {}
        for name, t in self.adapter_params.items():
            comp = component_of(name)
            out[comp] = out.get(comp, 0) + t.size
        return out

    @contextmanager
    def force_gates(self, value: float, kinds=None):
        """Temporarily pin gates of the given kinds (all by default) to ``value``."""
        prev = self._gate_override
        self._gate_override = (float(value), None if kinds is None else frozenset(kinds))
        try:
            yield self
        finally:
            self._gate_override = prev

    @contextmanager
    def passthrough(self):
        """All gates at 0 and the prompt bypassed: the adapted model reduces to the base."""
        prev = self._bypass_prompt
        self._bypass_prompt = True
        try:
            with self.force_gates(0.0):
                yield self
        finally:
            self._bypass_prompt = prev

    def adapter_hooks(self) -> "CompositionHooks":
        return CompositionHooks(self)


class CompositionHooks(NoHooks):
    """Hook object for one forward pass; caches prefix expansions."""

    def __init__(self, adapted: AdaptedModel):
        self.a = adapted
        self.cfg = adapted.config
        self._prefix_cache: dict[int, Tensor] = {}

    def _gate(self, ap: AdapterParams, layer: int, target: str, x: Tensor, mask):
        if not ap.spec.use_gating:
            return None
        override = self.a._gate_override
        if override is not None and (override[1] is None or ap.spec.kind in override[1]):
            return override[0]
        w, b = ap.gate(layer, target)
        return ak.gate_value(x, w, b, mask)

    def _members(self, kind: str):
        for g, members in enumerate(self.a.groups):
            for ap in members:
                if ap.spec.kind == kind:
                    yield g, ap

    def prompt(self):
        if self.a.prompt_params is None or self.a._bypass_prompt:
            return None
        return self.a.prompt_params.tensors["embedding"]

    def _attention(self, proj: str, layer: int, x, out, mask):
        for g, members in enumerate(self.a.groups):
            for ap in members:
                kind = ap.spec.kind
                if proj not in ap.spec.targets:
                    continue
                if kind == "lora":
                    t = ap.tensors
                    gate = self._gate(ap, layer, proj, x, mask)
                    out = ak.lora_apply(x, out, t[f"{layer}.{proj}.A"], t[f"{layer}.{proj}.B"],
                                        ap.spec.alpha, ap.spec.r, gate)
                elif kind == "ia3":
                    gate = self._gate(ap, layer, proj, x, mask)
                    out = ak.ia3_rescale(out, ap.tensors[f"{layer}.{proj}.scale"], gate)
        return out

    def query(self, layer, x, out, mask):
        return self._attention("query", layer, x, out, mask)

    def key(self, layer, x, out, mask):
        return self._attention("key", layer, x, out, mask)

    def value(self, layer, x, out, mask):
        return self._attention("value", layer, x, out, mask)

    def prefixes(self, layer, x, mask):
        blocks = []
        for g, ap in self._members("prefix"):
            kv = self._prefix_cache.get(g)
            if kv is None:
                t = ap.tensors
                kv = ak.prefix_expand(t["embedding"], t["mlp.w1"], t["mlp.b1"], t["mlp.w2"],
                                      t["mlp.b2"], self.cfg.num_layers)
                self._prefix_cache[g] = kv
            gate = self._gate(ap, layer, "block", x, mask)
            if gate is None:
                gate = Tensor(np.ones(x.shape[0], dtype=x.dtype))
            elif isinstance(gate, float):
                gate = Tensor(np.full(x.shape[0], gate, dtype=x.dtype))
            blocks.append((kv[layer, 0], kv[layer, 1], gate))
        return blocks

    def ffn_inner(self, layer, x, acts, mask):
        for g, ap in self._members("ia3"):
            if "ffn_inner" in ap.spec.targets:
                gate = self._gate(ap, layer, "ffn_inner", x, mask)
                acts = ak.ia3_rescale(acts, ap.tensors[f"{layer}.ffn_inner.scale"], gate)
        return acts

    def after_ffn(self, layer, h, mask):
        for g, ap in self._members("seqbn"):
            t = ap.tensors
            gate = self._gate(ap, layer, "block", h, mask)
            h = ak.seqbn_apply(h, t[f"{layer}.down.weight"], t[f"{layer}.down.bias"],
                               t[f"{layer}.up.weight"], t[f"{layer}.up.bias"], gate)
        return h


def attach(model: EncoderModel, spec: CompositionSpec, seed: int = 0) -> AdaptedModel:
    """Allocate adapter parameters for ``spec`` and freeze the backbone."""
    if not isinstance(model, EncoderModel):
        raise UsageError("attach expects a bare EncoderModel")
    cfg = model.config
    spec.check_config(cfg)
    rng = np.random.default_rng(seed)
    prompt = ak.allocate(spec.prompt, cfg, rng) if spec.prompt is not None else None
    groups = [[ak.allocate(m, cfg, rng) for m in spec.layer_members]
              for _ in range(spec.stack_depth)]
    return AdaptedModel(model, spec, groups, prompt)


def trainable_parameters(adapted: AdaptedModel, include_head: bool = True) -> list[tuple[str, Tensor]]:
    """Named tensors the freeze mask leaves trainable."""
    out = []
    for name, t in adapted.named_parameters():
        if not adapted.freeze_mask.trainable[name]:
            continue
        if not include_head and name.startswith("head."):
            continue
        out.append((name, t))
    return out
