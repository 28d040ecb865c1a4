"""Session-wide toy experiment harness shared by the acceptance tests.

Builds, once and lazily, the 10k/2k synthetic corpus, a base checkpoint
(3-epoch snapshot), a fine-tuned 4-layer teacher, and memoized distillation
runs; records wall-clock seconds per build step so each test can assert its
own runtime budget no matter which test triggered the work.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from mdkd.data import SyntheticTask, Vocab, gen_synthetic, make_batch, save_tsv
from mdkd.losses import internal_distill_loss
from mdkd.mapping import match_layers
from mdkd.model import EncoderModel, ModelConfig, save_checkpoint
from mdkd.trainer import RunConfig, build_student, evaluate, fit

TASK = SyntheticTask(n_symbols=20, min_tokens=4, max_tokens=6,
                     hi_band=(0.75, 1.0), lo_band=(0.0, 0.25))
CORPUS_SEED = 3          # dev split uses CORPUS_SEED + 1
N_TRAIN, N_DEV = 10_000, 2_000

TEACHER_CONFIG = dict(n_layers=4, n_heads=4, d_model=48, d_ff=96,
                      max_seq_len=16, n_classes=2)
MODEL_SEED = 11
BASE_EPOCHS = 3          # the underfit snapshot students initialize from
TEACHER_EPOCHS = 20      # continued fine-tune of the base
BASE_LR = 1e-3
TEACHER_LR = 1.5e-3
BATCH = 64
MAX_LEN = 16

DISTILL_SEEDS = (0, 1, 2, 3, 4)
DISTILL_LR = 1e-3
KL_EVAL_N = 256          # dev examples used for attention-KL-to-teacher


@dataclass
class ToyHarness:
    root: object
    vocab: Vocab = None
    train: list = None
    dev: list = None
    teacher: EncoderModel = None
    base_path: str = ""
    teacher_path: str = ""
    train_path: str = ""
    dev_path: str = ""
    vocab_path: str = ""
    teacher_train_accuracy: float = 0.0
    timings: dict = field(default_factory=dict)
    _runs: dict = field(default_factory=dict)
    _kl_batch: object = None
    _teacher_rec: object = None

    # -- corpus + teacher ---------------------------------------------------

    def ensure_teacher(self):
        if self.teacher is not None:
            return
        t0 = time.monotonic()
        self.vocab = TASK.vocab()
        self.train, _ = gen_synthetic(TASK, N_TRAIN, seed=CORPUS_SEED)
        self.dev, _ = gen_synthetic(TASK, N_DEV, seed=CORPUS_SEED + 1)
        self.train_path = str(self.root / "train.tsv")
        self.dev_path = str(self.root / "dev.tsv")
        self.vocab_path = str(self.root / "vocab.txt")
        save_tsv(self.train, self.train_path)
        save_tsv(self.dev, self.dev_path)
        self.vocab.save(self.vocab_path)
        self.timings["corpus"] = time.monotonic() - t0

        t0 = time.monotonic()
        config = ModelConfig(vocab_size=len(self.vocab), **TEACHER_CONFIG)
        model = EncoderModel.init_random(config, seed=MODEL_SEED)
        rc = RunConfig(recipe="exp1.0", epochs=BASE_EPOCHS, batch_size=BATCH,
                       max_seq_len=MAX_LEN, seed=MODEL_SEED, base_lr=BASE_LR)
        fit(model, None, rc, self.train, self.dev, self.vocab)
        self.base_path = str(self.root / "base.mdkd")
        save_checkpoint(model, self.base_path)

        rc = RunConfig(recipe="exp1.0", epochs=TEACHER_EPOCHS, batch_size=BATCH,
                       max_seq_len=MAX_LEN, seed=MODEL_SEED, base_lr=TEACHER_LR)
        fit(model, None, rc, self.train, self.dev, self.vocab)
        self.teacher_path = str(self.root / "teacher.mdkd")
        save_checkpoint(model, self.teacher_path)
        self.teacher = model.freeze()
        self.teacher_train_accuracy = evaluate(
            model, self.train, self.vocab, MAX_LEN)["accuracy"]
        self.timings["teacher"] = time.monotonic() - t0

    # -- distillation runs, memoized ----------------------------------------

    def run(self, recipe: str, seed: int, size: int = N_TRAIN, epochs: int = 4,
            init_from: str = "base"):
        """One distillation run; returns {"accuracy", "kl", "cos", "seconds"}."""
        key = (recipe, seed, size, epochs, init_from)
        if key in self._runs:
            return self._runs[key]
        self.ensure_teacher()
        t0 = time.monotonic()
        rc = RunConfig(recipe=recipe, epochs=epochs, teacher_ckpt=self.teacher_path,
                       base_ckpt=self.base_path, n_student_layers=2, batch_size=BATCH,
                       max_seq_len=MAX_LEN, seed=seed, base_lr=DISTILL_LR,
                       init_from=init_from, report_internal=False)
        needs_teacher = recipe != "exp1.1"
        teacher = self.teacher if needs_teacher else None
        student, plan = build_student(rc, self.teacher)
        log = fit(student, teacher, rc, self.train[:size], self.dev, self.vocab, plan)
        kl, cos = self.kl_to_teacher(student)
        result = {"accuracy": log[-1]["dev_metrics"]["accuracy"], "kl": kl, "cos": cos,
                  "seconds": time.monotonic() - t0, "student": student, "plan": plan}
        self._runs[key] = result
        self.timings[f"run {recipe} s{seed} n{size} e{epochs} {init_from}"] = (
            result["seconds"])
        return result

    def kl_to_teacher(self, student) -> tuple[float, float]:
        """Mean per-pair attention KL and CLS cosine loss on a fixed dev batch."""
        if self._kl_batch is None:
            self._kl_batch = make_batch(self.dev[:KL_EVAL_N], self.vocab, MAX_LEN)
            b = self._kl_batch
            self._teacher_rec = self.teacher.encode_batch(
                b.ids, b.mask, b.segments, capture=True)
        b = self._kl_batch
        s_rec = student.encode_batch(b.ids, b.mask, b.segments, capture=True)
        plan = match_layers(self.teacher.config.n_layers, student.config.n_layers)
        l_cos, l_kl = internal_distill_loss(self._teacher_rec, s_rec, plan.pairs, b.mask)
        n = len(plan.pairs)
        return l_kl.item() / n, l_cos.item() / n

    def seconds(self, *prefixes) -> float:
        return sum(v for k, v in self.timings.items()
                   if any(k.startswith(p) for p in prefixes))


@pytest.fixture(scope="session")
def toy(tmp_path_factory) -> ToyHarness:
    return ToyHarness(root=tmp_path_factory.mktemp("toy_harness"))
