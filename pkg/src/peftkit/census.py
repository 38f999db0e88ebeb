"""Closed-form parameter censuses for the backbone and adapter compositions.

Nothing here allocates tensors, so the full-size base shape is cheap to
count.  Brute-force counterparts live on :class:`~peftkit.composition.AdaptedModel`
and :class:`~peftkit.encoder.EncoderModel` for cross-checking.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import adapters as ak
from .composition import CompositionSpec
from .encoder import ModelConfig
from .errors import UsageError


@dataclass(frozen=True)
class ParameterCensus:
    entries: tuple[tuple[str, int], ...]
    base_total: int
    config: ModelConfig
    label: str = ""

    @property
    def total(self) -> int:
        return sum(n for _, n in self.entries)

    @property
    def trainable_total(self) -> int:
        return self.total

    @property
    def percent_of_base(self) -> float:
        return 100.0 * self.trainable_total / self.base_total

    @property
    def percent_text(self) -> str:
        return format_percent(self.percent_of_base)

    def as_dict(self) -> dict[str, int]:
        return dict(self.entries)

    def records(self) -> str:
        """Machine-readable ``path<TAB>count`` lines, then total and percent."""
        lines = [f"{path}\t{n}" for path, n in self.entries]
        lines.append(f"total\t{self.total}")
        lines.append(f"percent\t{self.percent_text}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        width = max([len(p) for p, _ in self.entries] + [len("component"), 5])
        rows = [f"{'component':<{width}}  {'params':>13}",
                f"{'-' * width}  {'-' * 13}"]
        rows += [f"{p:<{width}}  {n:>13,}" for p, n in self.entries]
        rows.append(f"{'-' * width}  {'-' * 13}")
        rows.append(f"{'total':<{width}}  {self.total:>13,}")
        rows.append(f"{'%param':<{width}}  {self.percent_text:>13}")
        return "\n".join(rows) + "\n"


def format_percent(p: float) -> str:
    """Four significant digits, the precision used in the reference tables."""
    return f"{p:.4g}"


def parse_records(text: str) -> dict[str, str]:
    """Inverse of :meth:`ParameterCensus.records`; ``#`` lines are skipped."""
    out = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, val = line.partition("\t")
            out[key] = val
    return out


def base_breakdown(cfg: ModelConfig) -> dict[str, int]:
    h, f = cfg.hidden, cfg.ffn_inner
    embeddings = (cfg.vocab_size + cfg.max_positions + cfg.type_vocab) * h + 2 * h
    attention = 4 * (h * h + h) + 2 * h
    ffn = (h * f + f) + (f * h + h) + 2 * h
    return {
        "embeddings": embeddings,
        "per_layer": attention + ffn,
        "pooler": h * h + h,
    }


def count_base(cfg: ModelConfig) -> ParameterCensus:
    """Bare encoder with pooler, no task head."""
    b = base_breakdown(cfg)
    entries = [("embeddings", b["embeddings"])]
    entries += [(f"layers.{i}", b["per_layer"]) for i in range(cfg.num_layers)]
    entries.append(("pooler", b["pooler"]))
    total = sum(n for _, n in entries)
    return ParameterCensus(tuple(entries), total, cfg, label="base")


def composition_breakdown(spec: CompositionSpec, cfg: ModelConfig) -> list[tuple[str, int]]:
    spec.check_config(cfg)
    entries = []
    if spec.prompt is not None:
        entries.append(("prompt", ak.kernel_param_count(spec.prompt, cfg)))
    for g in range(1, spec.stack_depth + 1):
        for m in spec.layer_members:
            entries.append((f"group{g}.{m.kind}", ak.kernel_param_count(m, cfg)))
            gates = ak.gate_param_count(m, cfg)
            if gates:
                entries.append((f"group{g}.{m.kind}.gates", gates))
    return entries


def count_composition(spec: CompositionSpec, cfg: ModelConfig) -> ParameterCensus:
    """Trainable adapter + gate scalars; the task head is not included."""
    entries = composition_breakdown(spec, cfg)
    return ParameterCensus(tuple(entries), count_base(cfg).total, cfg, label=spec.name)


def census_diff(a: ParameterCensus, b: ParameterCensus) -> dict[str, int]:
    """Signed per-component change ``a - b``; zero entries are dropped."""
    if a.config != b.config:
        raise UsageError("censuses were taken against different base configurations")
    da, db = a.as_dict(), b.as_dict()
    out = {}
    for key in list(da) + [k for k in db if k not in da]:
        delta = da.get(key, 0) - db.get(key, 0)
        if delta:
            out[key] = delta
    return out
