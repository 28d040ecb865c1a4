"""Distillation of transformer encoders into shallower students.

The package trains a small encoder to mimic a deeper frozen teacher through
three channels: the teacher's output distribution (soft labels), per-head
attention distributions (row-wise KL), and the position-0 hidden state at
matched layers (cosine). Matched layers can be trained all at once,
progressively one stage at a time, or stacked; see `mdkd.schedule`.

Everything runs on a small tape-based autodiff core (`mdkd.tensor`) over
numpy float64. Use the `mdkd` command-line tool or call `run_experiment`
with a `RunConfig` directly.
"""

from .data import (Batch, Example, SyntheticTask, TsvSchema, Vocab, gen_synthetic,
                   iter_batches, load_tsv, make_batch, overlap_label, save_tsv, tokenize)
from .errors import (ConfigError, ContractError, DataError, MdkdError, NumericError)
from .losses import (DistillWeights, cosine_cls_loss, head_loss, internal_distill_loss,
                     kl_attention_row, soft_label_loss)
from .mapping import LayerMatchPlan, init_student, match_layers
from .metrics import ConfusionCounts, accuracy, confusion, evaluate_predictions, f1_binary, mcc
from .model import (BatchForward, EncoderModel, ForwardRecord, ModelConfig,
                    load_checkpoint, param_count, param_shapes, save_checkpoint)
from .schedule import (ScheduleKind, ScheduleMode, ScheduleState, active_pairs, advance,
                       loss_plan)
from .tensor import Tape, Tensor, grad_check
from .trainer import (RECIPES, Recipe, RunConfig, evaluate, fit, init_optimizer, lr_at,
                      run_experiment)

__version__ = "0.1.0"

__all__ = [
    "Batch", "BatchForward", "ConfigError", "ConfusionCounts", "ContractError",
    "DataError", "DistillWeights", "EncoderModel", "Example", "ForwardRecord",
    "LayerMatchPlan", "MdkdError", "ModelConfig", "NumericError", "RECIPES",
    "Recipe", "RunConfig", "ScheduleKind", "ScheduleMode", "ScheduleState",
    "SyntheticTask", "Tape", "Tensor", "TsvSchema", "Vocab", "accuracy",
    "active_pairs", "advance", "confusion", "cosine_cls_loss", "evaluate",
    "evaluate_predictions", "f1_binary", "fit", "gen_synthetic", "grad_check",
    "head_loss", "init_optimizer", "init_student", "internal_distill_loss",
    "iter_batches", "kl_attention_row", "load_checkpoint", "load_tsv",
    "loss_plan", "lr_at", "make_batch", "match_layers", "mcc", "overlap_label",
    "param_count", "param_shapes", "run_experiment", "save_checkpoint",
    "save_tsv", "soft_label_loss", "tokenize",
]
