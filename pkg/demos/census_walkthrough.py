"""
Counting trainable parameters without building the model
=========================================================

Every adapter composition has a closed-form parameter count, so the
full RoBERTa-base shape (124M weights) never has to be allocated.
"""

from peftkit import ROBERTA_BASE, build_preset, count_base, count_composition
from peftkit.census import census_diff
from peftkit.composition import PRESET_NAMES

# the frozen backbone: embeddings, 12 identical layers, pooler
base = count_base(ROBERTA_BASE)
print(f"backbone: {base.total:,} parameters")

# each preset as a share of the backbone
for name in PRESET_NAMES:
    c = count_composition(build_preset(name), ROBERTA_BASE)
    print(f"{name:>18}: {c.total:>11,}  {c.percent_text:>6}%")

# the per-component ledger for plain UniPELT
unipelt = count_composition(build_preset("unipelt-lib"), ROBERTA_BASE)
print()
print(unipelt.table())

# prompt tuning adds one 10 x 768 embedding table and nothing else
prompted = count_composition(build_preset("pt-unipelt-lib"), ROBERTA_BASE)
print("prompt tuning adds:", census_diff(prompted, unipelt))

# swapping LoRA for IA3 trades a rank-8 update for three rescaling vectors
ia3 = count_composition(build_preset("ia3-prefix-seqbn"), ROBERTA_BASE)
for path, delta in census_diff(unipelt, ia3).items():
    print(f"  {path:>20}: {delta:+,}")
