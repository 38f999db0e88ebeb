"""
Gated adapters start as the identity
=====================================

A freshly attached composition leaves the encoder's output unchanged
when its gates sit at zero. LoRA and the bottleneck adapter are neutral
even with free gates because their output projections start at zero.
"""

import numpy as np

from peftkit import TINY, attach, build_preset, classify, init_model
from peftkit.encoder import Batch

rng = np.random.default_rng(0)

model = init_model(TINY, seed=0, head="classification")
# a random head, so identical logits are not a trivial consequence of zeros
model["head.weight"].data[...] = rng.standard_normal(model["head.weight"].shape)

batch = Batch(rng.integers(4, TINY.vocab_size, (4, 9)), np.ones((4, 9), dtype=np.int64))
bare = classify(model, batch).data

adapted = attach(model, build_preset("unipelt-paper"), seed=1)
print("adapter tensors:", len(adapted.adapter_params), "scalars:", adapted.adapter_count())

# with every gate pinned at zero the adapters vanish
with adapted.passthrough():
    delta = np.abs(classify(adapted, batch).data - bare).max()
print(f"all gates closed  -> max logit change {delta:.1e}")

# free gates: the prefix already shifts attention, the others do not
free = np.abs(classify(adapted, batch).data - bare).max()
print(f"free gates        -> max logit change {free:.1e}")
with adapted.force_gates(0.0, kinds={"prefix"}):
    delta = np.abs(classify(adapted, batch).data - bare).max()
print(f"prefix gate closed -> max logit change {delta:.1e}")
