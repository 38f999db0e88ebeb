import subprocess
import sys
from importlib import resources

import pytest

from peftkit.census import parse_records
from peftkit.cli import EXIT_DIVERGED, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from peftkit.composition import PRESET_NAMES

PATTERN = resources.files("peftkit").joinpath("resources", "pattern32.tsv").read_text()


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "pattern32.tsv").write_text(PATTERN)
    return tmp_path


def write_cfg(d, name="run.cfg", **extra):
    lines = {"preset": "unipelt-paper", "model.preset": "tiny-train",
             "data.train": "pattern32.tsv", "data.dev": "pattern32.tsv",
             "train.input_length": "16", "train.max_epochs": "3"}
    lines.update({k.replace("__", "."): v for k, v in extra.items()})
    path = d / name
    path.write_text("".join(f"{k}={v}\n" for k, v in lines.items()))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---- count-params / presets

def test_count_params_unipelt(capsys):
    code, out, _ = run(["count-params", "--preset", "unipelt-lib"], capsys)
    assert code == EXIT_OK
    assert "11,083,376" in out and "8.892" in out


def test_count_params_records(capsys):
    code, out, _ = run(["count-params", "--preset", "pt-unipelt-paper", "--format", "records"], capsys)
    rec = parse_records(out)
    assert code == EXIT_OK and rec["total"] == "11091056" and rec["percent"] == "8.898"
    assert rec["prompt"] == "7680"


def test_count_params_base(capsys):
    code, out, _ = run(["count-params", "--format", "records"], capsys)
    assert parse_records(out)["total"] == "124645632"


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_golden_match(name, capsys):
    code, out, _ = run(["count-params", "--preset", name, "--golden"], capsys)
    assert code == EXIT_OK and f"golden match: {name}" in out


def test_golden_needs_base_shape(capsys):
    code, _, err = run(["count-params", "--preset", "unipelt-lib", "--golden", "--layers", "2"], capsys)
    assert code == EXIT_USAGE and "roberta-base-shape" in err


def test_unknown_preset_lists_names(capsys):
    code, _, err = run(["count-params", "--preset", "nonsense"], capsys)
    assert code == EXIT_USAGE
    assert all(n in err for n in PRESET_NAMES)


def test_shape_flags_and_out_file(tmp_path, capsys):
    out_file = tmp_path / "c.txt"
    code, out, _ = run(["count-params", "--preset", "unipelt-lib", "--model-preset", "tiny",
                        "--layers", "3", "--format", "records", "--out", out_file], capsys)
    assert code == EXIT_OK and out_file.read_text() == out
    assert "group1.lora" in parse_records(out)


def test_bad_flag_is_usage_error(capsys):
    assert run(["count-params", "--bogus"], capsys)[0] == EXIT_USAGE
    assert run(["frobnicate"], capsys)[0] == EXIT_USAGE


def test_presets_listing(capsys):
    code, out, _ = run(["presets", "--format", "records"], capsys)
    rows = [line.split("\t") for line in out.splitlines()]
    assert code == EXIT_OK and [r[0] for r in rows] == list(PRESET_NAMES)
    assert rows[-1][1:] == ["3", "33250128", "26.68"]


# ---- train / eval

def test_train_and_eval(workdir, capsys):
    cfg = write_cfg(workdir, train__max_epochs="30")
    out_dir = workdir / "out"
    code, out, _ = run(["train", "--config", cfg, "--out", out_dir, "--lr", "5e-4"], capsys)
    assert code == EXIT_OK
    log = (out_dir / "train.log").read_text()
    assert "final.train_accuracy=1.0" in log
    assert "# train.learning_rate=0.0005 [flag]" in log
    assert "# train.max_epochs=30 [file run.cfg]" in log
    assert "# train.batch_size=16 [default]" in log
    ev = ["eval", out_dir / "model.ckpt", workdir / "pattern32.tsv",
          "--metric", "accuracy", "--metric", "mcc", "--metric", "f1"]
    code, first, _ = run(ev, capsys)
    assert code == EXIT_OK
    assert "accuracy=1.0" in first and "mcc=1.0" in first and "f1=1.0" in first
    assert run(ev, capsys)[1] == first
    # regression metric on a classification checkpoint
    assert run(ev[:3] + ["--metric", "spearman"], capsys)[0] == EXIT_USAGE


def test_plateau_is_logged(workdir, capsys):
    cfg = write_cfg(workdir, train__max_epochs="20", train__patience="2", train__learning_rate="1e-12")
    code, _, _ = run(["train", "--config", cfg, "--out", workdir / "o"], capsys)
    log = (workdir / "o" / "train.log").read_text()
    assert code == EXIT_OK and "early_stop\tepoch=3\tbest_epoch=1" in log


def test_train_is_deterministic(workdir, capsys):
    cfg = write_cfg(workdir)
    logs = []
    for d in ("a", "b"):
        assert run(["train", "--config", cfg, "--out", workdir / d, "--seed", "4"], capsys)[0] == 0
        logs.append([line.split("\telapsed=")[0] for line in
                     (workdir / d / "train.log").read_text().splitlines() if line.startswith("lr=")])
    assert logs[0] == logs[1] and len(logs[0]) == 3


def test_missing_dataset(workdir, capsys):
    cfg = write_cfg(workdir, data__train="nope.tsv")
    code, _, err = run(["train", "--config", cfg, "--out", workdir / "o"], capsys)
    assert code == EXIT_USAGE and "nope.tsv" in err
    assert run(["train", "--config", workdir / "absent.cfg"], capsys)[0] == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workdir, capsys):
    (workdir / "big.tsv").write_text("a b\t1e200\nc d\t2\n")
    cfg = write_cfg(workdir, data__train="big.tsv", data__dev="big.tsv", data__task_kind="regression")
    code, _, err = run(["train", "--config", cfg, "--out", workdir / "o"], capsys)
    assert code == EXIT_DIVERGED and "epoch 1, step 1" in err
    assert "diverged\tepoch=1\tstep=1" in (workdir / "o" / "train.log").read_text()


def test_span_checkpoint_on_classification_data(workdir, capsys):
    from peftkit.data import span_copy, write_dataset
    write_dataset(span_copy(8), workdir / "spans.tsv")
    cfg = write_cfg(workdir, data__train="spans.tsv", data__dev="spans.tsv",
                    data__format="spans", train__input_length="24", train__max_epochs="1")
    assert run(["train", "--config", cfg, "--out", workdir / "s"], capsys)[0] == EXIT_OK
    code, _, err = run(["eval", workdir / "s" / "model.ckpt", workdir / "pattern32.tsv",
                        "--data-format", "records"], capsys)
    assert code == EXIT_USAGE and "span" in err


def test_eval_missing_inputs(workdir, capsys):
    assert run(["eval", workdir / "none.ckpt", workdir / "pattern32.tsv"], capsys)[0] == EXIT_USAGE
    (workdir / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert run(["eval", workdir / "junk.ckpt", workdir / "pattern32.tsv"], capsys)[0] == EXIT_USAGE


# ---- verify

@pytest.mark.parametrize("suite", ["identity", "census"])
def test_verify_quick_suites(suite, capsys):
    code, out, _ = run(["verify", suite], capsys)
    assert code == EXIT_OK and "FAIL" not in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "peftkit", "count-params", "--preset",
                           "unipelt-stack3", "--golden"], capture_output=True, text=True)
    assert proc.returncode == 0 and "33,250,128" in proc.stdout
