"""
Memorising a tiny classification task
=====================================

A small encoder with only its adapters and head trainable should fit 32
separable examples perfectly. This is the sanity check that gradients
reach every adapter and the optimiser does its job.
"""

from importlib import resources

from peftkit import TrainConfig, attach, build_preset, init_model, train
from peftkit.data import load_dataset
from peftkit.encoder import TINY_TRAIN

path = resources.files("peftkit").joinpath("resources", "pattern32.tsv")
data = load_dataset(path)
print(f"{len(data)} examples, first one: {data.examples[0].texts[0]!r} -> {data.examples[0].target}")

model = attach(init_model(TINY_TRAIN, seed=0, head="classification"),
               build_preset("unipelt-paper"), seed=1)

# the usual batch 16 and patience 10; shorter inputs keep the demo quick
cfg = TrainConfig(input_length=32, learning_rate=5e-4)
model, report = train(model, data, data, cfg,
                      on_epoch=lambda rec: print(f"epoch {rec.epoch:2d}  loss {rec.train_loss:.4f}"
                                                 f"  accuracy {rec.dev_metric:.3f}"))

print("best epoch:", report.best_epoch, "stopped at:", report.stopped_epoch)
print("final:", report.metrics)
