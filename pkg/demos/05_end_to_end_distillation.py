"""End-to-end: train a small teacher, distill a half-depth student, and
compare their attention maps.

Uses a reduced corpus so the whole script runs in well under a minute; the
printed numbers are noisy at this scale but the shape of the pipeline is the
same one the command-line tool drives at full size.
"""

import numpy as np

from mdkd import (EncoderModel, ModelConfig, RunConfig, SyntheticTask, Vocab,
                  evaluate, fit, gen_synthetic, internal_distill_loss, make_batch,
                  match_layers)
from mdkd.trainer import build_student

task = SyntheticTask(n_symbols=20, min_tokens=4, max_tokens=6,
                     hi_band=(0.75, 1.0), lo_band=(0.0, 0.25))
vocab = task.vocab()
train, _ = gen_synthetic(task, 1500, seed=1)
dev, _ = gen_synthetic(task, 300, seed=2)
print(f"corpus: {len(train)} train / {len(dev)} dev, vocab {len(vocab)}")

# --- a 4-layer teacher, trained briefly --------------------------------------
config = ModelConfig(n_layers=4, n_heads=2, d_model=32, d_ff=64,
                     vocab_size=len(vocab), max_seq_len=16, n_classes=2)
teacher = EncoderModel.init_random(config, seed=3)
rc = RunConfig(recipe="exp1.0", epochs=10, batch_size=32, max_seq_len=16,
               seed=3, base_lr=1.5e-3)
log = fit(teacher, None, rc, train, dev, vocab)
print(f"teacher dev accuracy: {log[-1]['dev_metrics']['accuracy']:.3f}")
teacher.freeze()

# --- distill a 2-layer student with soft + attention KL + cosine -------------
rc = RunConfig(recipe="exp3.2", epochs=8, batch_size=32, max_seq_len=16,
               seed=4, base_lr=1.5e-3, n_student_layers=2, init_from="random",
               report_internal=True)
student, plan = build_student(rc, teacher)
print(f"\nstudent: {student.config.n_layers} layers ({student.n_params()} params, "
      f"teacher has {teacher.n_params()}); matched pairs {list(plan.pairs)}")
log = fit(student, teacher, rc, train, dev, vocab, plan)
for rec in log:
    print(f"  epoch {rec['epoch']}: l_soft={rec['l_soft']:.4f} "
          f"l_kl={rec['l_kl']:.4f} l_cos={rec['l_cos']:.4f} "
          f"dev={rec['dev_metrics']['accuracy']:.3f}")

# --- how close did the attention get? ----------------------------------------
batch = make_batch(dev[:64], vocab, 16)
t_rec = teacher.encode_batch(batch.ids, batch.mask, batch.segments, capture=True)
s_rec = student.encode_batch(batch.ids, batch.mask, batch.segments, capture=True)
l_cos, l_kl = internal_distill_loss(t_rec, s_rec, plan.pairs, batch.mask)
n_pairs = len(plan.pairs)
print(f"\nmean attention KL to teacher: {l_kl.item() / n_pairs:.4f}")
print(f"mean CLS cosine loss        : {l_cos.item() / n_pairs:.4f}")
print(f"final metrics: {evaluate(student, dev, vocab, 16)}")
