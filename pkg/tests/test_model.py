"""Encoder model: shapes, masking, capture records, checkpoint format."""

import os

import numpy as np
import pytest

from mdkd import tensor as T
from mdkd.errors import ConfigError, ContractError, DataError, ShapeError
from mdkd.model import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, EncoderModel, ModelConfig,
                        load_checkpoint, param_count, save_checkpoint, self_attention)
from mdkd.tensor import Tape, Tensor

SMALL = ModelConfig(2, 2, 8, 16, 50, 16, 2)


def make_batch(rng, model, n=4, length=10):
    cfg = model.config
    ids = rng.integers(4, cfg.vocab_size, size=(n, length))
    ids[:, 0] = 2
    lens = rng.integers(3, length + 1, size=n)
    mask = np.arange(length)[None, :] < lens[:, None]
    return np.where(mask, ids, 0), mask


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(2, 3, 8, 16, 50, 16, 2)  # d_model not divisible by heads
    with pytest.raises(ConfigError):
        ModelConfig(0, 2, 8, 16, 50, 16, 2)
    with pytest.raises(ConfigError):
        ModelConfig(2, 2, 8, 16, 50, 16, 2, dropout=1.0)
    assert SMALL.head_dim == 4


def test_param_count_closed_form():
    # embeddings 400+128+16, embedding norm 16, two layers of 600, head 18
    assert param_count(SMALL) == 1778
    model = EncoderModel.init_random(SMALL, seed=0)
    assert model.n_params() == 1778


def test_init_random_structure():
    model = EncoderModel.init_random(SMALL, seed=0)
    assert np.array_equal(model.params["emb_ln_g"].data, np.ones(8))
    assert np.array_equal(model.params["layers.0.bq"].data, np.zeros(8))
    assert model.params["tok_emb"].data.std() < 0.1  # small init
    # same seed, same params; different seed differs
    again = EncoderModel.init_random(SMALL, seed=0)
    other = EncoderModel.init_random(SMALL, seed=1)
    assert np.array_equal(model.params["tok_emb"].data, again.params["tok_emb"].data)
    assert not np.array_equal(model.params["tok_emb"].data, other.params["tok_emb"].data)


def test_forward_shapes_and_probs():
    rng = np.random.default_rng(0)
    model = EncoderModel.init_random(SMALL, seed=0)
    ids, mask = make_batch(rng, model, n=5, length=9)
    out = model.encode_batch(ids, mask, capture=True)
    assert out.probs.shape == (5, 2)
    assert np.abs(out.probs.data.sum(axis=1) - 1.0).max() < 1e-12
    assert len(out.attention) == 2 and len(out.cls_hidden) == 2
    assert out.attention[0].shape == (5, 2, 9, 9)
    assert out.cls_hidden[1].shape == (5, 8)


def test_attention_rows_stochastic_and_pad_columns_zero():
    rng = np.random.default_rng(1)
    model = EncoderModel.init_random(SMALL, seed=0)
    ids, mask = make_batch(rng, model, n=4, length=10)
    out = model.encode_batch(ids, mask, capture=True)
    for att in out.attention:
        a = att.data
        assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-12
        # padded key columns carry exactly zero probability
        pad_cols = ~mask
        for n in range(4):
            assert a[n][:, :, pad_cols[n]].max() == 0.0


def test_padding_invariance_bit_exact():
    rng = np.random.default_rng(2)
    model = EncoderModel.init_random(SMALL, seed=0)
    tokens = [2, 7, 8, 9, 3]
    short = model.encode(tokens, [1] * 5)
    padded = model.encode(tokens + [0, 0, 0], [1] * 5 + [0] * 3)
    assert np.array_equal(short.logits.data, padded.logits.data)
    assert np.array_equal(short.probs.data, padded.probs.data)


def test_encode_capture_per_sample():
    model = EncoderModel.init_random(SMALL, seed=0)
    rec = model.encode([2, 5, 6, 3], [1, 1, 1, 1], capture=True)
    assert len(rec.attention) == 2
    assert len(rec.attention[0]) == 2  # heads
    assert rec.attention[0][0].shape == (4, 4)
    assert rec.cls_hidden[0].shape == (8,)


def test_classify_matches_encode():
    model = EncoderModel.init_random(SMALL, seed=0)
    probs = model.classify([2, 5, 6, 3], [1, 1, 1, 1])
    rec = model.encode([2, 5, 6, 3], [1, 1, 1, 1])
    assert np.array_equal(probs, rec.probs.data)


def test_token_id_range_checked():
    model = EncoderModel.init_random(SMALL, seed=0)
    with pytest.raises(DataError):
        model.encode([2, 50, 3], [1, 1, 1])
    with pytest.raises(DataError):
        model.encode_batch(np.array([[2, -1, 3]]), np.ones((1, 3), dtype=bool))


def test_sequence_length_and_mask_contracts():
    model = EncoderModel.init_random(SMALL, seed=0)
    with pytest.raises(ContractError):
        model.encode_batch(np.full((1, 17), 2), np.ones((1, 17), dtype=bool))
    with pytest.raises(ShapeError):
        model.encode([2, 5], [1, 1, 1])
    with pytest.raises(ContractError):
        # CLS position masked out
        model.encode_batch(np.array([[2, 5, 3]]), np.array([[0, 1, 1]], dtype=bool))


def test_self_attention_single_sequence():
    model = EncoderModel.init_random(SMALL, seed=0)
    rng = np.random.default_rng(3)
    hidden = Tensor(rng.normal(size=(6, 8)))
    ctx, heads = self_attention(hidden, [1, 1, 1, 1, 0, 0], model.layer_params(0), 2)
    assert ctx.shape == (6, 8)
    assert len(heads) == 2 and heads[0].shape == (6, 6)
    assert np.abs(heads[0].data[:4].sum(axis=1) - 1.0).max() < 1e-12
    assert heads[0].data[:, 4:].max() == 0.0
    with pytest.raises(ContractError):
        self_attention(hidden, [0] * 6, model.layer_params(0), 2)


def test_full_model_gradcheck():
    rng = np.random.default_rng(4)
    model = EncoderModel.init_random(SMALL, seed=0)
    ids, mask = make_batch(rng, model, n=2, length=6)

    def f(_):
        out = model.encode_batch(ids, mask)
        return T.mean_all(T.mul(out.logits, out.logits))

    for name in ("layers.0.wq", "layers.1.w1", "tok_emb", "emb_ln_g", "cls_w"):
        assert T.grad_check(f, model.params[name]) < 1e-6, name


def test_dropout_only_active_with_rng():
    cfg = ModelConfig(2, 2, 8, 16, 50, 16, 2, dropout=0.5)
    model = EncoderModel.init_random(cfg, seed=0)
    ids = np.array([[2, 5, 6, 3]])
    mask = np.ones((1, 4), dtype=bool)
    a = model.encode_batch(ids, mask).probs.data
    b = model.encode_batch(ids, mask).probs.data
    assert np.array_equal(a, b)  # eval mode is deterministic
    c = model.encode_batch(ids, mask, rng=np.random.default_rng(0)).probs.data
    d = model.encode_batch(ids, mask, rng=np.random.default_rng(1)).probs.data
    assert not np.array_equal(c, d)


def test_freeze_and_copy_independence():
    model = EncoderModel.init_random(SMALL, seed=0)
    clone = model.copy()
    clone.params["cls_w"].data += 1.0
    assert not np.array_equal(model.params["cls_w"].data, clone.params["cls_w"].data)
    model.freeze()
    assert all(not p.requires_grad for p in model.params.values())


def test_frozen_model_records_nothing():
    model = EncoderModel.init_random(SMALL, seed=0).freeze()
    with Tape() as tape:
        out = model.encode_batch(np.array([[2, 5, 3]]), np.ones((1, 3), dtype=bool))
    assert out.probs.requires_grad is False
    assert len(tape._records) == 0


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = EncoderModel.init_random(SMALL, seed=0)
    path = str(tmp_path / "m.mdkd")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for k in model.params:
        assert np.array_equal(model.params[k].data, loaded.params[k].data), k


def test_checkpoint_bytes_deterministic(tmp_path):
    model = EncoderModel.init_random(SMALL, seed=0)
    p1, p2 = str(tmp_path / "a.mdkd"), str(tmp_path / "b.mdkd")
    save_checkpoint(model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_checkpoint_header_layout(tmp_path):
    model = EncoderModel.init_random(SMALL, seed=0)
    path = str(tmp_path / "m.mdkd")
    save_checkpoint(model, path)
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob[:4] == CHECKPOINT_MAGIC
    assert blob[4] == CHECKPOINT_VERSION
    assert len(blob) == 9 + int.from_bytes(blob[5:9], "little") + 8 * model.n_params()


def test_checkpoint_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.mdkd")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + bytes(16))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_write_is_atomic(tmp_path):
    model = EncoderModel.init_random(SMALL, seed=0)
    path = str(tmp_path / "m.mdkd")
    save_checkpoint(model, path)
    assert not os.path.exists(path + ".tmp")


def test_model_rejects_wrong_parameter_set():
    model = EncoderModel.init_random(SMALL, seed=0)
    params = dict(model.params)
    del params["cls_b"]
    with pytest.raises(ConfigError):
        EncoderModel(SMALL, params)
