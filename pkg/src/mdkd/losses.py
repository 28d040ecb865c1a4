"""Distillation losses: soft-label cross-entropy, attention-row KL, CLS cosine.

Teacher quantities enter every loss as plain arrays (detached constants), so
gradients only ever flow into the student. Probabilities are clamped at 1e-12
before any log; exact zeros on the teacher side follow the 0*log(0/q) = 0
convention and contribute nothing.

The attention loss treats one layer's [N, H, L, L] probability stack as N*H*L
rows, drops rows at padded query positions, averages KL per sample over the
remaining H * L_real rows, and averages the per-sample values over the batch.
Padded key columns carry exactly zero mass on both sides and cancel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .model import BatchForward
from .tensor import LOG_CLAMP, Tensor


@dataclass(frozen=True)
class DistillWeights:
    """Which loss terms a recipe enables, and the hard-label weight."""

    lambda_hard: float = 0.0
    use_soft: bool = False
    use_kl: bool = False
    use_cos: bool = False
    use_hard: bool = False

    def __post_init__(self):
        if self.lambda_hard < 0:
            raise ConfigError(f"lambda_hard must be >= 0, got {self.lambda_hard}")
        if not (self.use_soft or self.use_kl or self.use_cos or self.use_hard):
            raise ConfigError("DistillWeights enables no loss term")


def _as_prob_matrix(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected [N, C] probabilities, got shape {arr.shape}")
    return arr


def check_soft_labels(probs: np.ndarray) -> np.ndarray:
    """Validate rows are probability vectors (sum 1 +- 1e-9, entries >= 0)."""
    probs = _as_prob_matrix(probs, "soft labels")
    if probs.min() < 0:
        raise ContractError(f"soft labels contain a negative entry ({probs.min():.3e})")
    sums = probs.sum(axis=1)
    worst = np.abs(sums - 1.0).max()
    if worst > 1e-9:
        raise ContractError(f"soft-label row sums off by {worst:.3e} (> 1e-9)")
    return probs


def soft_label_loss(teacher_probs, student_probs, hard_labels=None,
                    lambda_hard: float = 0.0):
    """Cross-entropy against teacher distributions, plus optional hard-label term.

    -(1/N) sum_i sum_c pT(c|x_i) log y_i(c)  -  lambda (1/N) sum_i log y_i(y_i).
    student_probs may be a Tensor (differentiable) or an array; the return
    type follows the input.
    """
    p_t = check_soft_labels(teacher_probs)
    as_tensor = isinstance(student_probs, Tensor)
    s = student_probs if as_tensor else Tensor(_as_prob_matrix(student_probs, "student_probs"))
    if s.data.ndim == 1:
        s = T.reshape(s, (1, s.shape[0]))
    n, c = s.shape
    if p_t.shape != (n, c):
        raise ShapeError(f"soft_label_loss: teacher {p_t.shape} vs student {(n, c)}")

    target = p_t.copy()
    if hard_labels is not None and lambda_hard > 0.0:
        labels = np.asarray(hard_labels, dtype=np.intp)
        if labels.shape != (n,):
            raise ShapeError(f"soft_label_loss: {labels.shape} labels for batch of {n}")
        if labels.min() < 0 or labels.max() >= c:
            raise DataError(f"hard label out of range [0, {c}): {int(labels.min())}..{int(labels.max())}")
        # fold the hard term into one weighted cross-entropy pass
        target[np.arange(n), labels] += lambda_hard
    loss = T.scale(T.sum_all(T.mul(Tensor(target), T.log_clamped(s))), -1.0 / n)
    return loss if as_tensor else loss.item()


def kl_attention_row(p, q) -> float:
    """KL(p || q) for two attention rows; q clamped at 1e-12, 0*log(0/q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"kl_attention_row: rows {p.shape} vs {q.shape}")
    for name, row in (("p", p), ("q", q)):
        if abs(row.sum() - 1.0) > 1e-6:
            raise ContractError(f"kl_attention_row: {name} sums to {row.sum():.8f}, not 1")
    logq = np.log(np.maximum(q, LOG_CLAMP))
    logp = np.log(np.maximum(p, LOG_CLAMP))
    return float(np.where(p > 0, p * (logp - logq), 0.0).sum())


def _row_weights(att_p: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, float]:
    """Teacher-side constants for the batched attention KL.

    Returns (W, const) where the differentiable loss is
    const - sum(W * log(clamp(student_att))): W[n,h,i,j] folds the teacher
    probability and the per-row 1/(N * H * L_real_n) weight; const is the
    matching teacher log-term (entropy side), identically clamped so a student
    equal to the teacher gives exactly zero.
    """
    n, h, l, _ = att_p.shape
    real = masks.sum(axis=1).astype(np.float64)  # L_real per sample
    roww = masks.astype(np.float64) / (real[:, None] * h * n)  # [N, L]
    w = att_p * roww[:, None, :, None]
    logp = np.log(np.maximum(att_p, LOG_CLAMP))
    const = float(np.where(att_p > 0, w * logp, 0.0).sum())
    return w, const


def head_loss(teacher_rec: BatchForward, student_rec: BatchForward,
              layer_t: int, layer_s: int, masks=None):
    """Batch attention KL between one teacher layer and one student layer.

    Per sample, the KL of every non-padded row of every head, averaged over
    those rows; the per-sample values are then averaged over the batch.
    Differentiable in the student attention; returns a scalar Tensor.
    """
    masks = teacher_rec.mask if masks is None else np.asarray(masks, dtype=bool)
    if not 0 <= layer_t < len(teacher_rec.attention):
        raise ConfigError(f"head_loss: teacher layer {layer_t} out of range")
    if not 0 <= layer_s < len(student_rec.attention):
        raise ConfigError(f"head_loss: student layer {layer_s} out of range")
    att_t = teacher_rec.attention[layer_t]
    att_s = student_rec.attention[layer_s]
    if att_t.shape[1] != att_s.shape[1]:
        raise ConfigError(
            f"head_loss: teacher has {att_t.shape[1]} heads, student {att_s.shape[1]}; "
            "attention matching requires equal head counts")
    if att_t.shape != att_s.shape:
        raise ShapeError(f"head_loss: attention shapes {att_t.shape} vs {att_s.shape}")
    w, const = _row_weights(att_t.data, masks)
    cross = T.sum_all(T.mul(Tensor(w), T.log_clamped(att_s)))
    return T.add(T.scale(cross, -1.0), Tensor(np.asarray(const)))


def cosine_cls_loss(h_t, h_s):
    """1 - cos(h_t, h_s); for batches, the mean over samples.

    h_s may be a differentiable Tensor; h_t is treated as a constant.
    """
    t_arr = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t, dtype=np.float64)
    as_tensor = isinstance(h_s, Tensor)
    s = h_s if as_tensor else Tensor(np.asarray(h_s, dtype=np.float64))
    t2 = t_arr[None, :] if t_arr.ndim == 1 else t_arr
    s2 = s.data[None, :] if s.data.ndim == 1 else s.data
    if t2.shape != s2.shape:
        raise ShapeError(f"cosine_cls_loss: {t_arr.shape} vs {s.data.shape}")
    t_norms = np.linalg.norm(t2, axis=1)
    s_norms = np.linalg.norm(s2, axis=1)
    if t_norms.min() <= 1e-12:
        raise NumericError(f"cosine_cls_loss: teacher vector {int(t_norms.argmin())} has zero norm")
    if s_norms.min() <= 1e-12:
        raise NumericError(f"cosine_cls_loss: student vector {int(s_norms.argmin())} has zero norm")
    loss = T.mean_all(T.cosine_distance_rows(s, Tensor(t_arr)))
    return loss if as_tensor else loss.item()


def internal_distill_loss(teacher_rec: BatchForward, student_rec: BatchForward,
                          active_pairs, masks=None):
    """Sum cosine and attention-KL losses over the active (student, teacher) pairs.

    Returns (l_cos, l_kl) as separate scalar Tensors; the trainer backprops
    their sum and accumulates the schedule's tau from l_cos alone.
    """
    pairs = list(active_pairs)
    if not pairs:
        raise ContractError("internal_distill_loss: no active layer pairs")
    l_cos = None
    l_kl = None
    for layer_s, layer_t in pairs:
        if not 0 <= layer_t < len(teacher_rec.cls_hidden):
            raise ConfigError(f"internal_distill_loss: teacher layer {layer_t} out of range")
        if not 0 <= layer_s < len(student_rec.cls_hidden):
            raise ConfigError(f"internal_distill_loss: student layer {layer_s} out of range")
        c = cosine_cls_loss(Tensor(teacher_rec.cls_hidden[layer_t].data), student_rec.cls_hidden[layer_s])
        k = head_loss(teacher_rec, student_rec, layer_t, layer_s, masks)
        l_cos = c if l_cos is None else T.add(l_cos, c)
        l_kl = k if l_kl is None else T.add(l_kl, k)
    return l_cos, l_kl
