"""Teacher-student layer matching and student initialization.

A student of depth s compressed from a teacher of depth t = r*s is matched
group-wise: student layer i stands in for teacher layers (i*r .. (i+1)*r - 1)
and is initialized from the UPPER layer of that group, (i+1)*r - 1. The
initialization source is a general-purpose base checkpoint, not the
fine-tuned teacher; embeddings and (when class counts agree) the classifier
head are copied as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import EncoderModel, ModelConfig, param_shapes
from .tensor import Tensor


@dataclass(frozen=True)
class LayerMatchPlan:
    """Ordered (student_layer, teacher_layer) pairs, one per student layer."""

    pairs: tuple[tuple[int, int], ...]
    n_teacher: int
    n_student: int

    def __post_init__(self):
        if len(self.pairs) != self.n_student:
            raise ConfigError(f"plan has {len(self.pairs)} pairs for {self.n_student} student layers")
        students = [s for s, _ in self.pairs]
        teachers = [t for _, t in self.pairs]
        if students != list(range(self.n_student)):
            raise ConfigError(f"student indices must be 0..{self.n_student - 1} in order, got {students}")
        if any(b <= a for a, b in zip(teachers, teachers[1:])):
            raise ConfigError(f"teacher indices must be strictly increasing, got {teachers}")
        if teachers and (teachers[0] < 0 or teachers[-1] != self.n_teacher - 1):
            raise ConfigError(f"teacher indices {teachers} must end at {self.n_teacher - 1}")

    @property
    def teacher_layers(self) -> list[int]:
        return [t for _, t in self.pairs]


def match_layers(n_teacher: int, n_student: int) -> LayerMatchPlan:
    """Match each student layer to the upper teacher layer of its group."""
    if n_student < 1:
        raise ConfigError(f"n_student must be >= 1, got {n_student}")
    if n_teacher % n_student != 0:
        raise ConfigError(f"teacher depth {n_teacher} not divisible by student depth {n_student}")
    r = n_teacher // n_student
    pairs = tuple((i, (i + 1) * r - 1) for i in range(n_student))
    return LayerMatchPlan(pairs, n_teacher, n_student)


def init_student(base: EncoderModel, student_config: ModelConfig, plan: LayerMatchPlan,
                 head_seed: int = 0) -> EncoderModel:
    """Build a student whose layers copy the plan's base layers bit-exactly.

    Embeddings and norms are copied; the classifier head is copied when the
    class counts agree, else drawn small-random from head_seed. No storage is
    shared with the base model.
    """
    bc = base.config
    if bc.n_layers != plan.n_teacher:
        raise ConfigError(f"base has {bc.n_layers} layers but plan expects {plan.n_teacher}")
    if student_config.n_layers != plan.n_student:
        raise ConfigError(f"student config has {student_config.n_layers} layers, plan {plan.n_student}")
    if (bc.n_heads, bc.d_model) != (student_config.n_heads, student_config.d_model):
        raise ConfigError(
            f"head/width mismatch: base ({bc.n_heads} heads, d={bc.d_model}) "
            f"vs student ({student_config.n_heads} heads, d={student_config.d_model})")

    copy_head = bc.n_classes == student_config.n_classes
    rng = np.random.default_rng(head_seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(student_config).items():
        if name.startswith("layers."):
            i = int(name.split(".")[1])
            src_name = name.replace(f"layers.{i}.", f"layers.{plan.pairs[i][1]}.", 1)
        elif name.startswith("cls_") and not copy_head:
            data = np.zeros(shape) if name == "cls_b" else rng.normal(0.0, 0.02, size=shape)
            params[name] = Tensor(data, requires_grad=True)
            continue
        else:
            src_name = name
        src = base.params[src_name]
        if src.shape != shape:
            raise ConfigError(f"parameter {name}: base {src_name} has shape {src.shape}, student needs {shape}")
        params[name] = Tensor(src.data.copy(), requires_grad=True)
    return EncoderModel(student_config, params)
