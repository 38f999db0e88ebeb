import numpy as np
import pytest

from peftkit.data import (Dataset, Example, Span, decode_span, featurize, load_dataset,
                          pattern_classification, rank_regression, span_copy, write_dataset)
from peftkit.encoder import CLS_ID, PAD_ID, SEP_ID, HashTokenizer
from peftkit.errors import InputError, ParseError


def write(tmp_path, text, name="d.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_three_records(tmp_path):
    ds = load_dataset(write(tmp_path, "a b\t0\nc\t1\nd e f\t1\n"))
    assert len(ds) == 3 and ds.task_kind == "single-class"
    assert [e.target for e in ds.examples] == [0, 1, 1]
    assert ds.examples[2].texts == ("d e f",)


def test_pairs_and_regression(tmp_path):
    ds = load_dataset(write(tmp_path, "a\tb\t0\nc\td\t2\n"), "pairs")
    assert ds.task_kind == "pair-class" and ds.num_labels == 3
    reg = load_dataset(write(tmp_path, "x\t1.5\ny\t-2\n"), "records", task_kind="regression")
    assert [e.target for e in reg.examples] == [1.5, -2.0]


def test_named_labels(tmp_path):
    ds = load_dataset(write(tmp_path, "a\tpos\nb\tneg\n"), label_names=["neg", "pos"])
    assert [e.target for e in ds.examples] == [1, 0] and ds.num_labels == 2
    with pytest.raises(InputError, match="unknown label 'meh'"):
        load_dataset(write(tmp_path, "a\tpos\nb\tmeh\n"), label_names=["neg", "pos"])


def test_unknown_label_without_names(tmp_path):
    with pytest.raises(InputError, match=":2: unknown label"):
        load_dataset(write(tmp_path, "a\t0\nb\tyes\n"))


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(ParseError) as err:
        load_dataset(write(tmp_path, "a\t0\n\nb\t1\nno tab here\n"))
    assert err.value.line == 4 and ":4:" in str(err.value)
    with pytest.raises(ParseError) as err:
        load_dataset(write(tmp_path, "c\tq\tx\ta\n"), "spans")
    assert err.value.line == 1


def test_span_bounds(tmp_path):
    ok = load_dataset(write(tmp_path, "the cat sat\twho\t4\tcat\n"), "spans")
    assert ok.examples[0].target == Span(4, "cat")
    for bad in ("the cat sat\twho\t9\tcat\n", "the cat sat\twho\t-1\tcat\n",
                "the cat sat\twho\t0\tcat\n"):
        with pytest.raises(InputError, match="span"):
            load_dataset(write(tmp_path, bad), "spans")


def test_format_task_mismatch(tmp_path):
    p = write(tmp_path, "a\t0\n")
    with pytest.raises(InputError):
        load_dataset(p, "records", task_kind="span")
    with pytest.raises(InputError):
        load_dataset(p, "csv")


def test_empty_file_and_dataset(tmp_path):
    with pytest.raises(InputError):
        load_dataset(write(tmp_path, "\n\n"))
    with pytest.raises(InputError):
        Dataset([], "single-class")
    with pytest.raises(InputError):
        Dataset([Example(("a",), -1)], "single-class")


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_dataset(tmp_path / "nope.tsv")


@pytest.mark.parametrize("make", [pattern_classification, rank_regression, span_copy])
def test_round_trip(make, tmp_path):
    ds = make(20, seed=4)
    p = tmp_path / "rt.tsv"
    write_dataset(ds, p)
    back = load_dataset(p, ds.format, ds.task_kind)
    assert back.examples == ds.examples


def test_round_trip_named_labels(tmp_path):
    ds = Dataset([Example(("a",), 1), Example(("b",), 0)], "single-class", 2, ("neg", "pos"))
    write_dataset(ds, tmp_path / "n.tsv")
    assert (tmp_path / "n.tsv").read_text() == "a\tpos\nb\tneg\n"
    back = load_dataset(tmp_path / "n.tsv", label_names=["neg", "pos"])
    assert back.examples == ds.examples


def test_pattern_task_is_bag_of_words_separable():
    ds = pattern_classification(32, num_classes=3, seed=1, marker_share=0.3)
    for ex in ds.examples:
        classes = {int(w[1]) for w in ex.texts[0].split() if w.startswith("c")}
        assert classes == {ex.target}
    assert np.bincount([e.target for e in ds.examples]).tolist() == [11, 11, 10]
    with pytest.raises(InputError):
        pattern_classification(marker_share=0.0)


def test_generators_are_seeded():
    assert pattern_classification(8, seed=5).examples == pattern_classification(8, seed=5).examples
    assert span_copy(8, seed=5).examples != span_copy(8, seed=6).examples


def test_featurize_records_pad_and_truncate():
    tok = HashTokenizer(100)
    ds = Dataset([Example(("a b c",), 0), Example(("x " * 20,), 1)], "single-class")
    f = featurize(ds, tok, 8)
    assert f.ids.shape == (2, 8) and f.ids.dtype == np.int64
    assert f.ids[0].tolist()[:5] == [CLS_ID, tok.token_id("a"), tok.token_id("b"),
                                     tok.token_id("c"), SEP_ID]
    assert f.ids[0, 5:].tolist() == [PAD_ID] * 3 and f.mask[0].tolist() == [1] * 5 + [0] * 3
    assert f.mask[1].sum() == 8
    assert f.labels.tolist() == [0, 1]


def test_featurize_pairs():
    tok = HashTokenizer(100)
    f = featurize(Dataset([Example(("a", "b"), 0)], "pair-class"), tok, 8)
    assert f.ids[0, :6].tolist() == [CLS_ID, tok.token_id("a"), SEP_ID, SEP_ID, tok.token_id("b"), SEP_ID]


def test_span_features_locate_answer():
    ds = span_copy(16, seed=2)
    f = featurize(ds, HashTokenizer(100), 32)
    for i, ex in enumerate(ds.examples):
        s, e = f.labels[i]
        assert decode_span(f, i, s, e) == ex.target.text


def test_span_truncated_points_at_cls():
    ctx = " ".join(f"w{i}" for i in range(30))
    ex = Example((ctx, "q"), Span(ctx.index("w29"), "w29"))
    f = featurize(Dataset([ex], "span"), HashTokenizer(100), 12)
    assert f.labels[0].tolist() == [0, 0]
    assert decode_span(f, 0, 0, 0) == ""
    assert f.ids[0, -1] == SEP_ID
