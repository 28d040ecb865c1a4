"""Loss functions against brute-force oracles and their contract errors."""

import math

import numpy as np
import pytest

from mdkd import tensor as T
from mdkd.errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from mdkd.losses import (DistillWeights, cosine_cls_loss, head_loss, internal_distill_loss,
                         kl_attention_row, soft_label_loss)
from mdkd.model import BatchForward, EncoderModel, ModelConfig
from mdkd.tensor import Tape, Tensor


def rand_dist(rng, n):
    x = rng.random(n) + 1e-3
    return x / x.sum()


def fake_batch(att_by_layer, cls_by_layer, mask):
    """Assemble a BatchForward from raw arrays for hand-built cases."""
    n = mask.shape[0]
    probs = np.full((n, 2), 0.5)
    return BatchForward([Tensor(a) for a in att_by_layer],
                        [Tensor(c) for c in cls_by_layer],
                        Tensor(np.zeros((n, 2))), Tensor(probs), mask,
                        n_heads=att_by_layer[0].shape[1])


# -- soft_label_loss --------------------------------------------------------


def test_soft_label_perfect_match_zero():
    assert soft_label_loss([[1.0, 0.0]], [[1.0, 0.0]]) == pytest.approx(0.0, abs=1e-12)


def test_soft_label_uniform_ln2():
    assert soft_label_loss([[0.5, 0.5]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-12)


def test_soft_label_with_hard_term():
    got = soft_label_loss([[0.5, 0.5]], [[0.5, 0.5]], hard_labels=[0], lambda_hard=0.1)
    assert got == pytest.approx(1.1 * math.log(2), abs=1e-12)


def test_soft_label_matches_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        p_t = np.stack([rand_dist(rng, c) for _ in range(n)])
        q = np.stack([rand_dist(rng, c) for _ in range(n)])
        want = -np.mean([p_t[i] @ np.log(q[i]) for i in range(n)])
        assert abs(soft_label_loss(p_t, q) - want) < 1e-10


def test_soft_label_one_hot_equals_plain_ce():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, c = 4, 3
        labels = rng.integers(0, c, size=n)
        onehot = np.zeros((n, c))
        onehot[np.arange(n), labels] = 1.0
        q = np.stack([rand_dist(rng, c) for _ in range(n)])
        want = -np.mean(np.log(q[np.arange(n), labels]))
        assert abs(soft_label_loss(onehot, q) - want) < 1e-10


def test_soft_label_hard_errors():
    with pytest.raises(DataError):
        soft_label_loss([[0.5, 0.5]], [[0.5, 0.5]], hard_labels=[2], lambda_hard=0.1)
    with pytest.raises(ShapeError):
        soft_label_loss([[0.5, 0.5]], [[0.4, 0.3, 0.3]])
    with pytest.raises(ContractError):
        soft_label_loss([[0.7, 0.7]], [[0.5, 0.5]])  # teacher rows must sum to 1


def test_soft_label_differentiable():
    rng = np.random.default_rng(2)
    p_t = np.stack([rand_dist(rng, 3) for _ in range(4)])
    logits = Tensor(rng.normal(size=(4, 3)))

    def f(x):
        return soft_label_loss(p_t, T.softmax_rows(x))

    assert T.grad_check(f, logits) < 1e-6


# -- kl_attention_row -------------------------------------------------------


def test_kl_identical_zero():
    assert kl_attention_row([0.5, 0.5], [0.5, 0.5]) == 0.0


def test_kl_hand_value():
    got = kl_attention_row([0.75, 0.25], [0.25, 0.75])
    assert got == pytest.approx(0.5 * math.log(3), abs=1e-12)


def test_kl_zero_times_log_zero():
    assert kl_attention_row([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        assert kl_attention_row(rand_dist(rng, n), rand_dist(rng, n)) >= 0.0


def test_kl_matches_scipy_oracle():
    from scipy.stats import entropy
    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(2, 10))
        p, q = rand_dist(rng, n), rand_dist(rng, n)
        assert abs(kl_attention_row(p, q) - entropy(p, q)) < 1e-10


def test_kl_input_contracts():
    with pytest.raises(ShapeError):
        kl_attention_row([0.5, 0.5], [0.3, 0.3, 0.4])
    with pytest.raises(ContractError):
        kl_attention_row([0.9, 0.3], [0.5, 0.5])


# -- cosine_cls_loss --------------------------------------------------------


def test_cosine_cases():
    assert cosine_cls_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(0.0, abs=1e-12)
    assert cosine_cls_loss([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)
    assert cosine_cls_loss([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(2.0, abs=1e-12)


def test_cosine_range_and_scale_invariance():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        d = int(rng.integers(2, 8))
        a, b = rng.normal(size=d), rng.normal(size=d)
        v = cosine_cls_loss(a, b)
        assert 0.0 <= v <= 2.0
        s, t = rng.random() * 5 + 0.1, rng.random() * 5 + 0.1
        assert abs(cosine_cls_loss(s * a, t * b) - v) < 1e-12


def test_cosine_matches_dot_product_oracle():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        a, b = rng.normal(size=5), rng.normal(size=5)
        want = 1.0 - (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(cosine_cls_loss(a, b) - want) < 1e-10


def test_cosine_batch_mean():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert cosine_cls_loss(a, b) == pytest.approx(1.5, abs=1e-12)


def test_cosine_zero_norm_names_side():
    with pytest.raises(NumericError, match="teacher"):
        cosine_cls_loss([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(NumericError, match="student"):
        cosine_cls_loss([1.0, 0.0], [0.0, 0.0])


# -- head_loss --------------------------------------------------------------


def brute_head_loss(att_t, att_s, mask):
    """Independent per-row recount of the batch attention KL."""
    n, h, l, _ = att_t.shape
    acc = 0.0
    for i in range(n):
        ln = int(mask[i].sum())
        rows = []
        for j in range(h):
            for r in range(ln):
                p = att_t[i, j, r, :ln]
                q = att_s[i, j, r, :ln]
                rows.append(kl_attention_row(p / p.sum(), q / q.sum()))
        acc += np.mean(rows)
    return acc / n


def rand_attention(rng, n, h, l, mask):
    a = rng.random((n, h, l, l)) + 1e-3
    a *= mask[:, None, None, :]
    a /= a.sum(axis=-1, keepdims=True)
    return a


def test_head_loss_identical_zero():
    rng = np.random.default_rng(7)
    mask = np.array([[True] * 4, [True, True, True, False]])
    att = rand_attention(rng, 2, 1, 4, mask)
    rec = fake_batch([att], [np.ones((2, 3))], mask)
    assert head_loss(rec, rec, 0, 0, mask).item() == pytest.approx(0.0, abs=1e-14)


def test_head_loss_hand_built_two_samples():
    mask = np.ones((2, 2), dtype=bool)
    att_t = np.array([[[[0.75, 0.25], [0.5, 0.5]]], [[[0.9, 0.1], [0.2, 0.8]]]])
    att_s = np.array([[[[0.25, 0.75], [0.5, 0.5]]], [[[0.5, 0.5], [0.5, 0.5]]]])
    rec_t = fake_batch([att_t], [np.ones((2, 3))], mask)
    rec_s = fake_batch([att_s], [np.ones((2, 3))], mask)
    got = head_loss(rec_t, rec_s, 0, 0, mask).item()
    want = brute_head_loss(att_t, att_s, mask)
    assert got == pytest.approx(want, abs=1e-12)


def test_head_loss_random_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 4))
        h = int(rng.integers(1, 3))
        l = int(rng.integers(2, 6))
        lens = rng.integers(1, l + 1, size=n)
        mask = np.arange(l)[None, :] < lens[:, None]
        att_t = rand_attention(rng, n, h, l, mask)
        att_s = rand_attention(rng, n, h, l, mask)
        rec_t = fake_batch([att_t], [np.ones((n, 3))], mask)
        rec_s = fake_batch([att_s], [np.ones((n, 3))], mask)
        got = head_loss(rec_t, rec_s, 0, 0, mask).item()
        assert got == pytest.approx(brute_head_loss(att_t, att_s, mask), abs=1e-10)


def test_head_loss_batch_permutation_equivariant():
    rng = np.random.default_rng(9)
    mask = np.ones((4, 3), dtype=bool)
    att_t = rand_attention(rng, 4, 2, 3, mask)
    att_s = rand_attention(rng, 4, 2, 3, mask)
    a = head_loss(fake_batch([att_t], [np.ones((4, 3))], mask),
                  fake_batch([att_s], [np.ones((4, 3))], mask), 0, 0, mask).item()
    perm = np.array([2, 0, 3, 1])
    b = head_loss(fake_batch([att_t[perm]], [np.ones((4, 3))], mask),
                  fake_batch([att_s[perm]], [np.ones((4, 3))], mask), 0, 0, mask).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_head_loss_head_count_mismatch():
    rng = np.random.default_rng(10)
    mask = np.ones((1, 3), dtype=bool)
    one = fake_batch([rand_attention(rng, 1, 1, 3, mask)], [np.ones((1, 3))], mask)
    two = fake_batch([rand_attention(rng, 1, 2, 3, mask)], [np.ones((1, 3))], mask)
    with pytest.raises(ConfigError):
        head_loss(one, two, 0, 0, mask)


# -- internal_distill_loss --------------------------------------------------


def test_internal_distill_additivity():
    rng = np.random.default_rng(11)
    mask = np.ones((2, 3), dtype=bool)
    att = [rand_attention(rng, 2, 1, 3, mask) for _ in range(2)]
    att2 = [rand_attention(rng, 2, 1, 3, mask) for _ in range(2)]
    cls = [rng.normal(size=(2, 4)) for _ in range(2)]
    cls2 = [rng.normal(size=(2, 4)) for _ in range(2)]
    rec_t = fake_batch(att, cls, mask)
    rec_s = fake_batch(att2, cls2, mask)
    pairs = [(0, 0), (1, 1)]
    l_cos, l_kl = internal_distill_loss(rec_t, rec_s, pairs, mask)
    want_cos = sum(cosine_cls_loss(cls[t], cls2[s]) for s, t in pairs)
    want_kl = sum(head_loss(rec_t, rec_s, t, s, mask).item() for s, t in pairs)
    assert l_cos.item() == pytest.approx(want_cos, abs=1e-12)
    assert l_kl.item() == pytest.approx(want_kl, abs=1e-12)


def test_internal_distill_empty_pairs_error():
    mask = np.ones((1, 2), dtype=bool)
    rec = fake_batch([np.full((1, 1, 2, 2), 0.5)], [np.ones((1, 3))], mask)
    with pytest.raises(ContractError):
        internal_distill_loss(rec, rec, [], mask)


def test_teacher_side_gets_no_gradient():
    cfg = ModelConfig(2, 2, 8, 16, 30, 12, 2)
    teacher = EncoderModel.init_random(cfg, seed=0).freeze()
    student = EncoderModel.init_random(cfg, seed=1)
    ids = np.array([[2, 5, 6, 3], [2, 7, 3, 0]])
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    rec_t = teacher.encode_batch(ids, mask, capture=True)
    with Tape() as tape:
        rec_s = student.encode_batch(ids, mask, capture=True)
        l_cos, l_kl = internal_distill_loss(rec_t, rec_s, [(0, 0), (1, 1)], mask)
        tape.backward(T.add(l_cos, l_kl))
    assert all(p.grad is None for p in teacher.params.values())
    assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in student.params.values())


def test_distill_weights_validation():
    with pytest.raises(ConfigError):
        DistillWeights()  # nothing enabled
    with pytest.raises(ConfigError):
        DistillWeights(lambda_hard=-0.1, use_soft=True)
    DistillWeights(use_soft=True)
