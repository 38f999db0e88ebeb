import numpy as np
import pytest

from peftkit import autograd as ag
from peftkit.autograd import Tape, Tensor, backward
from peftkit.checkpoint import dumps_checkpoint, loads_checkpoint
from peftkit.composition import attach, build_preset
from peftkit.encoder import (CLS_ID, PAD_ID, ROBERTA_BASE, SEP_ID, TINY, Batch, HashTokenizer,
                             ModelConfig, classify, encode, init_model, regress, span_predict)
from peftkit.errors import ConfigError, InputError, UsageError


def closed_form_base(L, H, F, V, P, T):
    """Independent recount of every tensor in the encoder body with pooler."""
    emb = V * H + P * H + T * H + H + H
    attn = 4 * (H * H) + 4 * H + H + H
    ffn = H * F + F + F * H + H + H + H
    return emb + L * (attn + ffn) + H * H + H


def batch_for(cfg, rng, b=2, s=5, pad_tail=True):
    ids = rng.integers(4, cfg.vocab_size, (b, s))
    mask = np.ones((b, s), dtype=np.int64)
    if pad_tail and b > 1:
        mask[1, s - 2:] = 0
        ids[1, s - 2:] = PAD_ID
    return Batch(ids, mask)


def test_roberta_preset_values():
    c = ROBERTA_BASE
    assert (c.num_layers, c.hidden, c.num_heads, c.ffn_inner, c.vocab_size, c.max_positions,
            c.type_vocab, c.dropout, c.layer_norm_eps) == (12, 768, 12, 3072, 50265, 514, 1, 0.1, 1e-5)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=10, num_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        TINY.replace(precision=16)


def test_init_is_deterministic():
    a = init_model(TINY, 5, head="classification")
    b = init_model(TINY, 5, head="classification")
    assert a.flat().tobytes() == b.flat().tobytes()
    assert not np.array_equal(init_model(TINY, 6).flat(), init_model(TINY, 5).flat())


def test_init_scheme():
    m = init_model(TINY, 0)
    w = m["layers.0.attention.query.weight"].data
    assert np.all(np.abs(w) <= 2 * TINY.init_std)
    assert abs(w.std() - 0.88 * TINY.init_std) < 0.01
    assert np.all(m["layers.0.attention.query.bias"].data == 0)
    assert np.all(m["layers.1.ffn.norm.gamma"].data == 1)
    assert np.all(m["embeddings.norm.beta"].data == 0)


def test_tiny_count_matches_closed_form():
    m = init_model(TINY, 0)
    assert m.backbone_count() == closed_form_base(2, 16, 32, 100, 64, 1)
    assert m.head_count() == 0


def test_head_counted_separately():
    m = init_model(TINY, 0, head="classification", num_labels=3)
    assert m.head_count() == 16 * 3 + 3
    assert m.backbone_count() == closed_form_base(2, 16, 32, 100, 64, 1)


def test_encode_shape_and_eval_determinism(tiny_cls, rng):
    batch = batch_for(TINY, rng)
    a = encode(tiny_cls, batch).data
    b = encode(tiny_cls, batch).data
    assert a.shape == (2, 5, 16)
    assert a.tobytes() == b.tobytes()


def test_train_mode_dropout_varies(tiny_cls, rng):
    batch = batch_for(TINY, rng)
    a = encode(tiny_cls, batch, "train", np.random.default_rng(0)).data
    b = encode(tiny_cls, batch, "train", np.random.default_rng(1)).data
    assert not np.array_equal(a, b)
    with pytest.raises(UsageError):
        encode(tiny_cls, batch, "train")


def test_appending_masked_pad_leaves_real_positions(tiny_cls, rng):
    batch = batch_for(TINY, rng, pad_tail=False)
    out = encode(tiny_cls, batch).data
    ids = np.concatenate([batch.ids, np.full((2, 1), PAD_ID)], axis=1)
    mask = np.concatenate([batch.mask, np.zeros((2, 1), dtype=np.int64)], axis=1)
    longer = encode(tiny_cls, Batch(ids, mask)).data
    assert np.abs(longer[:, :5] - out).max() < 1e-10


def test_masked_tokens_do_not_influence_real_positions(tiny_cls, rng):
    batch = batch_for(TINY, rng)
    out = encode(tiny_cls, batch).data
    ids = batch.ids.copy()
    ids[1, 3:] = 77
    other = encode(tiny_cls, Batch(ids, batch.mask)).data
    assert np.abs(other[1, :3] - out[1, :3]).max() < 1e-12


def test_batch_permutation_equivariance(tiny_cls, rng):
    batch = batch_for(TINY, rng, b=4, s=6)
    out = classify(tiny_cls, batch).data
    perm = np.array([2, 0, 3, 1])
    assert np.allclose(classify(tiny_cls, batch.take(perm)).data, out[perm], atol=1e-14)


def test_vocab_and_length_errors(tiny_cls):
    with pytest.raises(InputError):
        encode(tiny_cls, Batch(np.array([[1, 100]]), np.ones((1, 2))))
    n = TINY.max_positions - 1
    with pytest.raises(InputError):
        encode(tiny_cls, Batch(np.full((1, n), 5), np.ones((1, n))))
    with pytest.raises(InputError):
        Batch(np.zeros((1, 2)), np.array([[1, 2]]))


def test_classify_contract(rng):
    m = init_model(TINY, 1, head="classification", num_labels=2)
    m["head.weight"].data[...] = rng.standard_normal(m["head.weight"].shape)
    logits = classify(m, batch_for(TINY, rng, b=3))
    assert logits.shape == (3, 2)
    p = ag.softmax(logits).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12
    m["head.weight"].data[...] = 0
    assert np.all(classify(m, batch_for(TINY, rng, b=3)).data == 0)


def test_missing_heads_are_usage_errors(rng):
    bare = init_model(TINY, 0)
    batch = batch_for(TINY, rng)
    for fn in (classify, regress, span_predict):
        with pytest.raises(UsageError):
            fn(bare, batch)
    with pytest.raises(UsageError):
        classify(init_model(TINY, 0, head="span"), batch)


def test_span_predict_contract(rng):
    m = init_model(TINY, 2, head="span")
    m["head.weight"].data[...] = rng.standard_normal((16, 2))
    batch = batch_for(TINY, rng)
    start, end = span_predict(m, batch)
    assert start.shape == end.shape == (2, 5)
    assert np.all(np.isneginf(start.data[1, 3:])) and np.all(np.isneginf(end.data[1, 3:]))
    assert start.data.argmax(axis=1)[1] < 3
    m["head.weight"].data[...] = 0
    start, _ = span_predict(m, batch)
    assert np.all(start.data[0] == start.data[0, 0])


def test_regress_contract_and_gradient(rng):
    m = init_model(TINY, 3, head="regression")
    batch = batch_for(TINY, rng, b=3)
    assert regress(m, batch).shape == (3,)
    assert np.all(regress(m, batch).data == 0)
    w, b = m["head.weight"], m["head.bias"]
    w.data[...] = rng.standard_normal(w.shape) * 0.3
    w.requires_grad = b.requires_grad = True
    y = Tensor(np.array([0.5, -1.0, 2.0]))

    def loss():
        return ag.mean(ag.square(regress(m, batch) - y))

    with Tape() as tape:
        value = loss()
    backward(tape, value)

    def f():
        with ag.no_grad():
            return loss().item()

    for t in (w, b):
        assert ag.relative_error(t.grad, ag.numerical_grad(f, t)) < 1e-6


def test_tokenizer_format():
    tok = HashTokenizer(100)
    ids, mask = tok.encode("Hello world", length=6)
    assert ids[0] == CLS_ID and ids[3] == SEP_ID and ids[4:] == [PAD_ID, PAD_ID]
    assert mask == [1, 1, 1, 1, 0, 0]
    assert tok.token_id("hello") == ids[1]
    assert all(4 <= i < 100 for i in ids[1:3])
    ids, _ = tok.encode("a b", "c", length=20)
    assert ids[:7] == [CLS_ID, ids[1], ids[2], SEP_ID, SEP_ID, ids[5], SEP_ID]
    ids, mask = tok.encode("w " * 50, length=8)
    assert len(ids) == 8 and sum(mask) == 8


def test_float32_mode_runs(rng):
    m = init_model(TINY.replace(precision=32), 0, head="classification")
    assert m["layers.0.attention.query.weight"].dtype == np.float32
    assert classify(m, batch_for(TINY, rng)).shape == (2, 2)


@pytest.mark.parametrize("preset", [None, "pt-unipelt-lib", "unipelt-stack3"])
def test_checkpoint_round_trip_is_bit_exact(preset, rng):
    model = init_model(TINY, 4, head="span")
    if preset:
        model = attach(model, build_preset(preset), 9)
    for _, t in model.named_parameters():
        t.data[...] = rng.standard_normal(t.shape)
    blob = dumps_checkpoint(model, {"note": "x"})
    back, meta = loads_checkpoint(blob)
    assert meta == {"note": "x"}
    a, b = dict(model.named_parameters()), dict(back.named_parameters())
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert dumps_checkpoint(back, {"note": "x"}) == blob
    if preset:
        assert back.spec == model.spec
        assert back.freeze_mask == model.freeze_mask


def test_checkpoint_rejects_corruption():
    blob = dumps_checkpoint(init_model(TINY, 0))
    with pytest.raises(InputError, match="magic"):
        loads_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(InputError, match="version"):
        loads_checkpoint(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(InputError, match="truncated"):
        loads_checkpoint(blob[:-40])
