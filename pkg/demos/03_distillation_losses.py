"""The three distillation losses on small, hand-checkable inputs.

Shows the soft-label cross entropy, the row-wise attention KL, and the CLS
cosine distance; then demonstrates the zero-loss fixed point: a student that
is an exact copy of its teacher has zero internal loss.
"""

import numpy as np

from mdkd import (EncoderModel, ModelConfig, SyntheticTask, cosine_cls_loss,
                  gen_synthetic, internal_distill_loss, kl_attention_row,
                  make_batch, match_layers, soft_label_loss)

# --- soft labels: cross entropy against teacher probabilities ----------------
teacher_probs = np.array([[0.9, 0.1], [0.3, 0.7]])
student_probs = np.array([[0.8, 0.2], [0.4, 0.6]])
l_soft = soft_label_loss(teacher_probs, student_probs)
print(f"soft-label loss: {l_soft:.6f}")
hand = -np.mean((teacher_probs * np.log(student_probs)).sum(axis=1))
print(f"hand-computed  : {hand:.6f}")

# --- attention rows: KL(p || q) ----------------------------------------------
p = np.array([0.75, 0.25])
q = np.array([0.25, 0.75])
print(f"\nKL([0.75,0.25] || [0.25,0.75]) = {kl_attention_row(p, q):.6f}"
      f"  (0.5*ln 3 = {0.5 * np.log(3):.6f})")
print(f"KL of a row with itself        = {kl_attention_row(p, p):.6f}")

# --- CLS vectors: cosine distance --------------------------------------------
h_t = np.array([1.0, 0.0, 0.0])
h_s = np.array([1.0, 1.0, 0.0])
print(f"\ncosine loss at 45 degrees: {cosine_cls_loss(h_t, h_s):.6f}"
      f"  (1 - 1/sqrt(2) = {1 - 2 ** -0.5:.6f})")

# --- the fixed point: student == teacher -> zero internal loss ---------------
task = SyntheticTask()
vocab = task.vocab()
config = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32,
                     vocab_size=len(vocab), max_seq_len=16, n_classes=2)
teacher = EncoderModel.init_random(config, seed=7).freeze()
student = teacher.copy()

examples, _ = gen_synthetic(task, 32, seed=5)
batch = make_batch(examples, vocab, 16)
t_rec = teacher.encode_batch(batch.ids, batch.mask, batch.segments, capture=True)
s_rec = student.encode_batch(batch.ids, batch.mask, batch.segments, capture=True)
plan = match_layers(2, 2)
l_cos, l_kl = internal_distill_loss(t_rec, s_rec, plan.pairs, batch.mask)
print(f"\nstudent = exact copy of teacher over a 32-sample batch:")
print(f"  attention KL = {l_kl.item():.3e}")
print(f"  cosine loss  = {l_cos.item():.3e}")
