"""Command-line interface: ``peftkit <command> [flags]``.

Exit codes: 0 success, 1 a verification or golden comparison failed,
2 usage/configuration/input problems (including missing files), 3 the
training loss diverged.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from . import kvtext
from .census import count_base, count_composition, parse_records
from .checkpoint import load_checkpoint, save_checkpoint
from .composition import PRESET_NAMES, CompositionSpec, attach, build_preset
from .data import FORMATS, TASK_KINDS, load_dataset
from .encoder import MODEL_PRESETS, ModelConfig, init_model
from .errors import PeftError, TrainingError, UsageError
from .train import TrainConfig, evaluate, train
from .verify import SUITES

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

_SHAPE_FLAGS = {
    "layers": "num_layers", "hidden": "hidden", "heads": "num_heads", "ffn": "ffn_inner",
    "vocab": "vocab_size", "positions": "max_positions", "type_vocab": "type_vocab",
}
_TRAIN_FLAGS = {
    "batch_size": "batch_size", "input_length": "input_length", "epochs": "max_epochs",
    "patience": "patience", "lr": "learning_rate", "dropout": "dropout",
}
_TASK_HEAD = {"single-class": "classification", "pair-class": "classification",
              "regression": "regression", "span": "span"}
BUILTIN_PREFIX = "@"


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting so main() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def golden_text(preset: str) -> str:
    return resources.files("peftkit").joinpath("golden", f"{preset}.records").read_text()


def resolve_config_path(value: str) -> Path:
    """``@name`` names a config bundled with the package."""
    if value.startswith(BUILTIN_PREFIX):
        name = value[len(BUILTIN_PREFIX):]
        path = Path(str(resources.files("peftkit").joinpath("resources", f"{name}.cfg")))
        if not path.is_file():
            raise UsageError(f"no bundled config named {name!r}")
        return path
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"config file not found: {value}")
    return path


# ---------------------------------------------------------------------------
# settings with provenance


class Settings:
    """Flat ``key -> (value, source)`` store; later layers override earlier ones."""

    def __init__(self):
        self.values: dict[str, tuple[str, str]] = {}

    def layer(self, d: dict[str, str], source: str) -> None:
        for k, v in d.items():
            if v is not None:
                self.values[k] = (str(v), source)

    def get(self, key: str, default=None):
        return self.values[key][0] if key in self.values else default

    def section(self, prefix: str) -> dict[str, str]:
        return kvtext.section({k: v for k, (v, _) in self.values.items()}, prefix)

    def header(self) -> list[str]:
        return [f"# {k}={v} [{src}]" for k, (v, src) in sorted(self.values.items())]


def _model_config(settings: Settings) -> ModelConfig:
    name = settings.get("model.preset", "roberta-base-shape")
    if name not in MODEL_PRESETS:
        raise UsageError(f"unknown model preset {name!r}; valid: {', '.join(MODEL_PRESETS)}")
    overrides = {k: v for k, v in settings.section("model").items() if k != "preset"}
    d = {k: str(v) for k, v in MODEL_PRESETS[name].to_dict().items()}
    unknown = set(overrides) - set(d)
    if unknown:
        raise UsageError(f"unknown model keys {sorted(unknown)}")
    d.update(overrides)
    cfg = ModelConfig.from_dict(d)
    cfg.validate()
    return cfg


def _composition(settings: Settings) -> CompositionSpec | None:
    inline = settings.section("composition")
    preset = settings.get("preset")
    if preset and inline:
        raise UsageError("give either a preset or an inline composition, not both")
    if preset:
        return build_preset(preset)
    if inline:
        return CompositionSpec.from_dict(inline)
    return None


def _flag_layer(args, mapping: dict[str, str], prefix: str) -> dict[str, str]:
    out = {}
    for flag, key in mapping.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[f"{prefix}{key}"] = val
    return out


def _load_settings(args, defaults: dict[str, str]) -> tuple[Settings, Path | None]:
    settings = Settings()
    settings.layer(defaults, "default")
    path = None
    if getattr(args, "config", None):
        path = resolve_config_path(args.config)
        settings.layer(kvtext.load(path), f"file {path.name}")
    flags = _flag_layer(args, _SHAPE_FLAGS, "model.")
    flags.update(_flag_layer(args, _TRAIN_FLAGS, "train."))
    for flag, key in (("preset", "preset"), ("model_preset", "model.preset"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            flags[key] = getattr(args, flag)
    settings.layer(flags, "flag")
    return settings, path


# ---------------------------------------------------------------------------
# commands


def _emit(text: str, out: str | None) -> None:
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text)


def cmd_count_params(args) -> int:
    settings, _ = _load_settings(args, {"model.preset": "roberta-base-shape"})
    cfg = _model_config(settings)
    spec = _composition(settings)
    census = count_base(cfg) if spec is None else count_composition(spec, cfg)
    if args.golden:
        if spec is None or spec.name not in PRESET_NAMES:
            raise UsageError("--golden needs one of the named presets")
        if cfg != MODEL_PRESETS["roberta-base-shape"]:
            raise UsageError("golden censuses are recorded at the roberta-base-shape model")
    body = census.records() if args.format == "records" else census.table()
    header = f"# census {census.label} at {settings.get('model.preset')}"
    if spec is not None:
        header += f" (base {census.base_total:,})"
    _emit(header + "\n" + body, args.out)
    if args.golden:
        want = parse_records(golden_text(spec.name))
        got = parse_records(census.records())
        if want != got:
            diff = [k for k in sorted(set(want) | set(got)) if want.get(k) != got.get(k)]
            print(f"golden mismatch for {spec.name}: {', '.join(diff)}")
            return EXIT_FAIL
        print(f"golden match: {spec.name}")
    return EXIT_OK


def cmd_presets(args) -> int:
    cfg = MODEL_PRESETS["roberta-base-shape"]
    lines = []
    for name in PRESET_NAMES:
        spec = build_preset(name)
        members = ", ".join(
            f"{m.kind}(" + ", ".join(f"{k}={v}" for k, v in m.to_dict().items() if k != "kind") + ")"
            for m in spec.members)
        c = count_composition(spec, cfg)
        if args.format == "records":
            lines.append(f"{name}\t{spec.stack_depth}\t{c.trainable_total}\t{c.percent_text}")
        else:
            lines.append(f"{name}: depth {spec.stack_depth}; {members}")
            lines.append(f"    {c.trainable_total:,} trainable ({c.percent_text}% of base)")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _dataset(settings: Settings, which: str, base: Path | None):
    raw = settings.get(f"data.{which}")
    if raw is None:
        raise UsageError(f"config lacks data.{which}")
    path = Path(raw)
    if not path.is_absolute() and base is not None:
        path = base / path
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    labels = settings.get("data.labels")
    return load_dataset(path, settings.get("data.format", "records"),
                        settings.get("data.task_kind"),
                        labels.split(",") if labels else None)


def cmd_train(args) -> int:
    defaults = {"model.preset": "tiny-train", "seed": "0", "grid": "false",
                "data.format": "records"}
    defaults.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items() if k != "seed"})
    settings, path = _load_settings(args, defaults)
    if args.grid is not None:
        settings.layer({"grid": str(args.grid).lower()}, "flag")
    base_dir = path.parent if path else None
    cfg = _model_config(settings)
    spec = _composition(settings)
    if spec is None:
        raise UsageError("training needs a preset or an inline composition")
    seed = int(settings.get("seed"))
    tdict = settings.section("train")
    tdict["seed"] = str(seed)
    tcfg = TrainConfig.from_dict(tdict)
    train_ds = _dataset(settings, "train", base_dir)
    dev_ds = _dataset(settings, "dev", base_dir)
    head = _TASK_HEAD[train_ds.task_kind]
    labels = max(train_ds.num_labels or 1, dev_ds.num_labels or 1) if head == "classification" else 2

    def make():
        return attach(init_model(cfg, seed, head=head, num_labels=labels), spec, seed + 1)

    out = Path(args.out or settings.get("out", "run"))
    out.mkdir(parents=True, exist_ok=True)
    header = settings.header()
    print("\n".join(header))
    log_lines = list(header)

    current_lr = [tcfg.learning_rate]

    def on_epoch(rec):
        line = f"lr={current_lr[0]!r}\t{rec.line()}"
        log_lines.append(line)
        print(line, flush=True)

    try:
        if settings.get("grid") == "true":
            best = None
            for lr in tcfg.lr_grid:
                current_lr[0] = lr
                run_cfg = TrainConfig(**{**asdict(tcfg), "learning_rate": lr})
                m, r = train(make(), train_ds, dev_ds, run_cfg, on_epoch)
                if best is None or max(r.history) > max(best[1].history):
                    best = (m, r)
            model, report = best
        else:
            model, report = train(make(), train_ds, dev_ds, tcfg, on_epoch)
    except TrainingError as exc:
        log_lines.append(f"diverged\tepoch={exc.epoch}\tstep={exc.step}")
        (out / "train.log").write_text("\n".join(log_lines) + "\n")
        raise

    metric = tcfg.metric or next(iter(report.metrics))
    train_report = evaluate(model, train_ds, [metric], tcfg.input_length)
    summary = [f"final.{line}" for line in report.lines()]
    summary += [f"final.train_{k}={v!r}" for k, v in train_report.metrics.items()]
    if report.stopped_epoch is not None:
        summary.append(f"early_stop\tepoch={report.stopped_epoch}\tbest_epoch={report.best_epoch}")
    log_lines += summary
    (out / "train.log").write_text("\n".join(log_lines) + "\n")
    meta = {"input_length": tcfg.input_length, "metric": metric, "seed": seed,
            "task_kind": train_ds.task_kind, "data.format": settings.get("data.format")}
    if train_ds.label_names:
        meta["data.labels"] = ",".join(train_ds.label_names)
    save_checkpoint(model, out / "model.ckpt", meta)
    print("\n".join(summary))
    print(f"wrote {out / 'model.ckpt'} and {out / 'train.log'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    data_path = Path(args.dataset)
    if not data_path.is_file():
        raise UsageError(f"dataset not found: {data_path}")
    model, meta = load_checkpoint(ckpt)
    fmt = args.data_format or meta.get("data.format", "records")
    kind = args.task_kind
    if kind is None and fmt == meta.get("data.format"):
        kind = meta.get("task_kind")
    labels = args.labels or meta.get("data.labels")
    ds = load_dataset(data_path, fmt, kind, labels.split(",") if labels else None)
    length = args.input_length or int(meta.get("input_length", 128))
    report = evaluate(model, ds, args.metric or None, length)
    _emit("\n".join(report.lines()) + "\n", args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    result = SUITES[args.suite](seed=args.seed or 0)
    _emit("\n".join(result.lines()) + "\n", args.out)
    return EXIT_OK if result.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--out", default=None, help="output file (or directory for train)")
    common.add_argument("--format", choices=("table", "records"), default="table")

    shape = _Parser(add_help=False)
    shape.add_argument("--model-preset", choices=sorted(MODEL_PRESETS), default=None)
    for flag in _SHAPE_FLAGS:
        shape.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=int, default=None)

    p = _Parser(prog="peftkit", description="Gated adapter compositions on a RoBERTa-shaped encoder.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("count-params", parents=[common, shape], help="parameter census")
    c.add_argument("--preset", default=None, help=f"one of: {', '.join(PRESET_NAMES)}")
    c.add_argument("--config", default=None, help="key-value config file (or @name for a bundled one)")
    c.add_argument("--golden", action="store_true", help="compare with the stored golden census")
    c.set_defaults(func=cmd_count_params)

    s = sub.add_parser("presets", parents=[common], help="list composition presets")
    s.set_defaults(func=cmd_presets)

    t = sub.add_parser("train", parents=[common, shape], help="train an adapted model")
    t.add_argument("--config", required=True, help="experiment config (or @synthetic)")
    t.add_argument("--preset", default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--input-length", dest="input_length", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=str, help="integer or 'none'")
    t.add_argument("--lr", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--grid", action=argparse.BooleanOptionalAction, default=None,
                   help="train once per grid learning rate and keep the best")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--metric", action="append", default=None,
                   help="metric name; repeat for several")
    e.add_argument("--data-format", choices=sorted(FORMATS), default=None)
    e.add_argument("--task-kind", choices=TASK_KINDS, default=None)
    e.add_argument("--labels", default=None, help="comma-separated label names")
    e.add_argument("--input-length", dest="input_length", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run a property suite")
    v.add_argument("suite", choices=sorted(SUITES))
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PeftError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
