"""Gated adapter compositions on a RoBERTa-shaped encoder, in numpy."""
from .adapters import AdapterSpec
from .autograd import Tape, Tensor, backward, no_grad
from .census import ParameterCensus, census_diff, count_base, count_composition
from .checkpoint import load_checkpoint, save_checkpoint
from .composition import (PRESET_NAMES, AdaptedModel, CompositionSpec, FreezeMask, attach,
                          build_preset, trainable_parameters)
from .data import Dataset, Example, Span, load_dataset, write_dataset
from .encoder import (MODEL_PRESETS, ROBERTA_BASE, TINY, TINY_TRAIN, Batch, EncoderModel,
                      HashTokenizer, ModelConfig, classify, encode, init_model, regress,
                      span_predict)
from .errors import (ConfigError, DimensionError, InputError, ParseError, PeftError,
                     TrainingError, UsageError)
from .train import MetricReport, TrainConfig, early_stop_check, evaluate, train, train_with_grid

__version__ = "0.1.0"
