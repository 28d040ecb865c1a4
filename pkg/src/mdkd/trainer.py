"""Training loops: Adam with warmup-linear learning rate, the distillation
epoch, and end-to-end experiment recipes.

A recipe bundles the loss terms and schedule mode of one experiment row:

    exp1.0  full-size model, hard labels only (teacher fine-tune)
    exp1.1  student-size model, hard labels only (no distillation)
    exp2.0  soft labels only (standard distillation)
    exp3.0  soft + attention KL on all matched layers
    exp3.1  soft + CLS cosine on all matched layers
    exp3.2  soft + attention KL + CLS cosine on all matched layers
    exp3.3  progressive internal distillation (kl + cos one layer at a time), then soft
    exp3.4  stacked internal distillation (kl + cos, layers accumulate), then soft
    exp3.5  stacked, with soft labels also during the internal phase
    exp3.6  stacked, soft + hard labels (lambda 0.1) in both phases

During the internal phase of progressive/stacked runs the classifier head is
excluded from optimizer steps, so it stays exactly as initialized until the
classification phase begins. All loss terms are evaluated every epoch for the
run log; terms outside the enabled set contribute nothing to the gradient, so
disabling their computation changes no parameter.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import Example, Vocab, iter_batches, load_tsv, write_atomic
from .errors import ConfigError, ContractError, DataError, NumericError
from .losses import DistillWeights, internal_distill_loss, soft_label_loss
from .mapping import LayerMatchPlan, init_student, match_layers
from .metrics import evaluate_predictions
from .model import EncoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .schedule import (ScheduleKind, ScheduleMode, ScheduleState, active_pairs, advance,
                       loss_plan)
from .tensor import Tape

CLASSIFIER_PARAMS = ("cls_w", "cls_b")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to base_lr over `warmup` steps, then linear decay to 0."""
    if total <= warmup:
        raise ConfigError(f"lr schedule needs total ({total}) > warmup ({warmup})")
    if warmup <= 0:
        raise ConfigError(f"lr schedule needs warmup > 0, got {warmup}")
    if not 0 <= step <= total:
        raise ContractError(f"lr_at: step {step} outside [0, {total}]")
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total - step) / (total - warmup)


@dataclass
class OptimizerState:
    """Adam moments plus the lr schedule; moments match parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    base_lr: float
    warmup: int
    total: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


def init_optimizer(model: EncoderModel, base_lr: float, total_steps: int,
                   warmup: int | None = None, clip_norm: float = 1.0) -> OptimizerState:
    if warmup is None:
        warmup = max(1, int(round(0.1 * total_steps)))  # 10% warmup
    if total_steps <= warmup:
        raise ConfigError(f"total_steps={total_steps} leaves no decay phase after warmup={warmup}")
    zeros = lambda: {k: np.zeros_like(p.data) for k, p in model.params.items()}
    return OptimizerState(m=zeros(), v=zeros(), step=0, base_lr=base_lr,
                          warmup=warmup, total=total_steps, clip_norm=clip_norm)


def adam_step(opt: OptimizerState, model: EncoderModel,
              trainable: set[str] | None = None) -> float:
    """One clipped Adam update over parameters with gradients; returns the lr used."""
    names = [k for k, p in model.params.items()
             if p.grad is not None and (trainable is None or k in trainable)]
    opt.step += 1
    lr = lr_at(opt.step, opt.base_lr, opt.warmup, opt.total)
    gnorm = math.sqrt(sum(float(np.sum(model.params[k].grad ** 2)) for k in names))
    scale = 1.0 if gnorm <= opt.clip_norm else opt.clip_norm / gnorm
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for k in names:
        g = model.params[k].grad * scale
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[k] / bc1
        v_hat = opt.v[k] / bc2
        model.params[k].data -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return lr


# ---------------------------------------------------------------------------
# Recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Recipe:
    weights: DistillWeights
    mode: ScheduleMode | None
    needs_teacher: bool
    description: str


_ALL = ScheduleKind.ALL_LAYERS
RECIPES: dict[str, Recipe] = {
    "exp1.0": Recipe(DistillWeights(lambda_hard=1.0, use_hard=True), None, False,
                     "full-size fine-tune on hard labels"),
    "exp1.1": Recipe(DistillWeights(lambda_hard=1.0, use_hard=True), None, False,
                     "student-size training on hard labels, no distillation"),
    "exp2.0": Recipe(DistillWeights(use_soft=True), None, True,
                     "soft labels only"),
    "exp3.0": Recipe(DistillWeights(use_soft=True, use_kl=True),
                     ScheduleMode(_ALL, soft_during_internal=True), True,
                     "soft + attention KL, all layers"),
    "exp3.1": Recipe(DistillWeights(use_soft=True, use_cos=True),
                     ScheduleMode(_ALL, soft_during_internal=True), True,
                     "soft + CLS cosine, all layers"),
    "exp3.2": Recipe(DistillWeights(use_soft=True, use_kl=True, use_cos=True),
                     ScheduleMode(_ALL, soft_during_internal=True), True,
                     "soft + attention KL + CLS cosine, all layers"),
    "exp3.3": Recipe(DistillWeights(use_soft=True, use_kl=True, use_cos=True),
                     ScheduleMode(ScheduleKind.PROGRESSIVE), True,
                     "progressive internal distillation, then soft"),
    "exp3.4": Recipe(DistillWeights(use_soft=True, use_kl=True, use_cos=True),
                     ScheduleMode(ScheduleKind.STACKED), True,
                     "stacked internal distillation, then soft"),
    "exp3.5": Recipe(DistillWeights(use_soft=True, use_kl=True, use_cos=True),
                     ScheduleMode(ScheduleKind.STACKED, soft_during_internal=True), True,
                     "stacked internal distillation with soft labels throughout"),
    "exp3.6": Recipe(DistillWeights(lambda_hard=0.1, use_soft=True, use_kl=True,
                                    use_cos=True, use_hard=True),
                     ScheduleMode(ScheduleKind.STACKED, soft_during_internal=True,
                                  hard_during_internal=True), True,
                     "stacked internal distillation with soft and hard labels"),
}


@dataclass
class RunConfig:
    """Settings of one training run. Schedule knobs apply only to recipes with
    an advancing schedule; setting them elsewhere is a configuration error."""

    recipe: str
    epochs: int
    train_path: str = ""
    dev_path: str = ""
    vocab_path: str = ""
    teacher_ckpt: str | None = None
    base_ckpt: str | None = None
    out_dir: str | None = None
    n_student_layers: int | None = None
    batch_size: int = 32
    max_seq_len: int = 64
    seed: int = 0
    base_lr: float = 2e-5
    dropout: float = 0.0
    lambda_hard: float | None = None
    threshold: float | None = None
    stage_limit: int | None = None
    init_from: str = "base"
    report_internal: bool = True
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {sorted(RECIPES)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        recipe = RECIPES[self.recipe]
        scheduled = recipe.mode is not None and recipe.mode.kind is not _ALL
        if not scheduled and (self.threshold is not None or self.stage_limit is not None):
            raise ConfigError(
                f"recipe {self.recipe} has no advancing schedule; threshold/stage_limit do not apply")
        if self.lambda_hard is not None and not recipe.weights.use_hard:
            raise ConfigError(f"recipe {self.recipe} has no hard-label term; lambda_hard does not apply")
        if self.init_from not in ("base", "teacher", "random"):
            raise ConfigError(f"init_from must be base|teacher|random, got {self.init_from!r}")

    def resolved_weights(self) -> DistillWeights:
        w = RECIPES[self.recipe].weights
        if self.lambda_hard is not None:
            w = replace(w, lambda_hard=self.lambda_hard)
        return w


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_finite(value: float, term: str, batch_index: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {term} loss in batch {batch_index}")
    return value


def train_epoch(teacher: EncoderModel | None, student: EncoderModel,
                mode: ScheduleMode | None, state: ScheduleState | None,
                plan: LayerMatchPlan | None, weights: DistillWeights,
                batches, opt: OptimizerState, trainable: set[str] | None = None,
                report_internal: bool = True,
                dropout_rng: np.random.Generator | None = None) -> dict:
    """Run one epoch; returns per-term epoch means and the accumulated tau.

    Enabled terms are the recipe weights restricted to the schedule's phase;
    the other terms are still evaluated for the log but carry no gradient.
    """
    allowed = loss_plan(mode, state) if mode is not None and state is not None else None
    enabled = {t for t, on in (("soft", weights.use_soft), ("kl", weights.use_kl),
                               ("cos", weights.use_cos), ("hard", weights.use_hard)) if on}
    if allowed is not None:
        enabled &= allowed
    pairs = active_pairs(mode, state, plan) if mode is not None and state is not None else \
        (list(plan.pairs) if plan is not None and teacher is not None else [])
    want_internal = bool(pairs) and teacher is not None and \
        (report_internal or bool(enabled & {"kl", "cos"}))
    if not enabled:
        raise ContractError("train_epoch: no loss term enabled for this phase")
    if ("kl" in enabled or "cos" in enabled) and (teacher is None or not pairs):
        raise ConfigError("internal losses enabled but no teacher/active pairs available")
    if "soft" in enabled and teacher is None:
        raise ConfigError("soft-label loss enabled but no teacher given")

    sums = {"l_soft": 0.0, "l_kl": 0.0, "l_cos": 0.0, "l_hard": 0.0}
    seen = {k: 0 for k in sums}
    n_batches = 0
    for b_idx, batch in enumerate(batches):
        n_batches += 1
        rec_t = None
        if teacher is not None:
            rec_t = teacher.encode_batch(batch.ids, batch.mask, batch.segments,
                                         capture=want_internal)
        student.zero_grad()
        with Tape() as tape:
            rec_s = student.encode_batch(batch.ids, batch.mask, batch.segments,
                                         capture=want_internal, rng=dropout_rng)
            terms: dict[str, object] = {}
            if rec_t is not None:
                terms["soft"] = soft_label_loss(rec_t.probs.data, rec_s.probs)
            if batch.labels is not None:
                terms["hard"] = soft_label_loss(
                    _one_hot(batch.labels, student.config.n_classes), rec_s.probs)
            elif "hard" in enabled:
                raise DataError(f"hard-label loss enabled but batch {b_idx} has no labels")
            if want_internal:
                l_cos, l_kl = internal_distill_loss(rec_t, rec_s, pairs, batch.mask)
                terms["cos"], terms["kl"] = l_cos, l_kl

            vals = {name: _check_finite(t.item(), name, b_idx) for name, t in terms.items()}
            total = None
            for name in sorted(enabled):
                part = terms[name]
                if name == "hard":
                    part = T.scale(part, weights.lambda_hard)
                total = part if total is None else T.add(total, part)
            tape.backward(total)
        adam_step(opt, student, trainable)

        for name, key in (("soft", "l_soft"), ("kl", "l_kl"), ("cos", "l_cos"), ("hard", "l_hard")):
            if name in vals:
                sums[key] += vals[name]
                seen[key] += 1
    if n_batches == 0:
        raise ContractError("train_epoch: empty batch iterator")
    stats = {k: (sums[k] / seen[k] if seen[k] else None) for k in sums}
    stats["tau"] = stats["l_cos"] if stats["l_cos"] is not None else 0.0
    stats["n_batches"] = n_batches
    return stats


def evaluate(model: EncoderModel, examples: list[Example], vocab: Vocab,
             max_len: int, batch_size: int = 128) -> dict:
    """Dev/test metrics from argmax predictions; deterministic, no dropout."""
    if not examples:
        raise DataError("no examples to evaluate")
    preds = []
    golds = []
    for batch in iter_batches(examples, vocab, max_len, batch_size):
        if batch.labels is None:
            raise DataError("evaluation requires labeled examples")
        rec = model.encode_batch(batch.ids, batch.mask, batch.segments)
        preds.extend(np.argmax(rec.probs.data, axis=1).tolist())
        golds.extend(batch.labels.tolist())
    return evaluate_predictions(preds, golds)


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------


def fit(student: EncoderModel, teacher: EncoderModel | None, config: RunConfig,
        train_ex: list[Example], dev_ex: list[Example], vocab: Vocab,
        plan: LayerMatchPlan | None = None) -> list[dict]:
    """The per-epoch loop shared by all recipes; returns the run log."""
    recipe = RECIPES[config.recipe]
    weights = config.resolved_weights()
    mode = recipe.mode
    state = None
    if mode is not None:
        state = ScheduleState(
            n_layers=student.config.n_layers,
            threshold=config.threshold if config.threshold is not None else 0.01,
            stage_epoch_limit=config.stage_limit if config.stage_limit is not None else 10)
        if plan is None:
            raise ConfigError(f"recipe {config.recipe} needs a layer match plan")
    scheduled = mode is not None and mode.kind is not _ALL

    n_batches = math.ceil(len(train_ex) / config.batch_size)
    opt = init_optimizer(student, config.base_lr, config.epochs * n_batches)
    log: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        internal_phase = scheduled and not state.in_classification_phase
        trainable = None
        if internal_phase:
            trainable = {k for k in student.params if k not in CLASSIFIER_PARAMS}
        dropout_rng = (np.random.default_rng([config.seed, epoch, 0xD0])
                       if student.config.dropout > 0 else None)
        batches = iter_batches(train_ex, vocab, config.max_seq_len, config.batch_size,
                               seed=config.seed, epoch=epoch)
        stats = train_epoch(teacher, student, mode, state, plan, weights, batches,
                            opt, trainable, config.report_internal, dropout_rng)
        dev = evaluate(student, dev_ex, vocab, config.max_seq_len, config.eval_batch_size)
        if not scheduled:
            phase = "supervised" if teacher is None else "distill"
        else:
            phase = "classification" if state.in_classification_phase else "internal"
        log.append({
            "epoch": epoch, "phase": phase,
            "next_locked": state.next_locked if scheduled else None,
            "l_soft": stats["l_soft"], "l_kl": stats["l_kl"], "l_cos": stats["l_cos"],
            "l_hard": stats["l_hard"], "tau": stats["tau"], "dev_metrics": dev,
        })
        if internal_phase:
            # a student at the exact fixed point can report tau = -1e-16
            state = advance(replace(state, tau_epoch=max(stats["tau"], 0.0)))
    return log


def load_corpus(config: RunConfig, n_classes: int):
    vocab = Vocab.load(config.vocab_path)
    train_ex, bad_train = load_tsv(config.train_path, n_classes=n_classes)
    dev_ex, bad_dev = load_tsv(config.dev_path, n_classes=n_classes)
    if not train_ex:
        raise DataError(f"{config.train_path}: no training examples")
    if not dev_ex:
        raise DataError(f"{config.dev_path}: no dev examples")
    return vocab, train_ex, dev_ex, bad_train + bad_dev


def build_student(config: RunConfig, teacher: EncoderModel | None):
    """Student model + match plan per the config's depth and init source."""
    if config.init_from == "teacher":
        source = teacher
        if source is None:
            raise ConfigError("init_from=teacher but recipe loads no teacher")
    elif config.init_from == "base":
        if not config.base_ckpt:
            raise ConfigError("init_from=base requires base_ckpt")
        source = load_checkpoint(config.base_ckpt)
    else:
        source = None

    depth_ref = teacher if teacher is not None else source
    if config.n_student_layers is None:
        raise ConfigError("n_student_layers is required for student recipes")
    if depth_ref is None:
        raise ConfigError("init_from=random still needs a teacher or base for the model shape")
    sc = depth_ref.config
    student_cfg = ModelConfig(config.n_student_layers, sc.n_heads, sc.d_model, sc.d_ff,
                              sc.vocab_size, sc.max_seq_len, sc.n_classes, config.dropout)
    plan = match_layers(depth_ref.config.n_layers, config.n_student_layers)
    if source is not None:
        if source.config.n_layers != plan.n_teacher:
            raise ConfigError(f"init source depth {source.config.n_layers} != plan depth {plan.n_teacher}")
        student = init_student(source, student_cfg, plan, head_seed=config.seed)
    else:
        student = EncoderModel.init_random(student_cfg, config.seed)
    return student, plan


def run_experiment(config: RunConfig) -> tuple[EncoderModel, list[dict]]:
    """Execute a recipe end to end; writes checkpoint + JSON-lines log when
    out_dir is set. Returns (student, log)."""
    recipe = RECIPES[config.recipe]
    teacher = None
    if recipe.needs_teacher:
        if not config.teacher_ckpt:
            raise ConfigError(f"recipe {config.recipe} requires teacher_ckpt")
        teacher = load_checkpoint(config.teacher_ckpt).freeze()
    student, plan = build_student(config, teacher)
    if teacher is not None and teacher.config.n_heads != student.config.n_heads:
        raise ConfigError(
            f"teacher has {teacher.config.n_heads} heads but student has "
            f"{student.config.n_heads}; attention matching requires equal head counts")
    vocab, train_ex, dev_ex, _ = load_corpus(config, student.config.n_classes)
    if len(vocab) != student.config.vocab_size:
        raise DataError(f"vocab size {len(vocab)} != model vocab {student.config.vocab_size}")

    log = fit(student, teacher, config, train_ex, dev_ex, vocab, plan)

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        save_checkpoint(student, os.path.join(config.out_dir, "student.mdkd"))
        write_log(log, os.path.join(config.out_dir, "log.jsonl"))
    return student, log


def write_log(log: list[dict], path: str) -> None:
    write_atomic(path, "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log))
