"""Distillation schedules: which layer pairs are active in which epoch.

Three modes. ALL_LAYERS distills every matched pair every epoch. PROGRESSIVE
works on exactly one pair at a time, bottom-up. STACKED keeps all pairs up to
the current one active. The progressive and stacked modes advance to the next
layer when the epoch's accumulated cosine loss tau falls below a threshold or
the stage hits its epoch limit, whichever happens first; when every layer has
been unlocked the run enters a classification phase where only soft (and
optionally hard) label losses remain.

The state machine is pure: advance() returns a new state, so a recorded trace
of tau values can be replayed to reproduce an advancement sequence exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .errors import ConfigError, ContractError
from .mapping import LayerMatchPlan

DEFAULT_THRESHOLD = 0.01
DEFAULT_STAGE_LIMIT = 10


class ScheduleKind(str, Enum):
    ALL_LAYERS = "all_layers"
    PROGRESSIVE = "progressive"
    STACKED = "stacked"


@dataclass(frozen=True)
class ScheduleMode:
    kind: ScheduleKind
    soft_during_internal: bool = False
    hard_during_internal: bool = False


@dataclass(frozen=True)
class ScheduleState:
    """Advancement state for one run. epoch_in_stage counts from 1."""

    n_layers: int
    next_locked: int = 0
    tau_epoch: float = 0.0
    threshold: float = DEFAULT_THRESHOLD
    epoch_in_stage: int = 1
    stage_epoch_limit: int = DEFAULT_STAGE_LIMIT

    def __post_init__(self):
        if not 0 <= self.next_locked <= self.n_layers:
            raise ContractError(f"next_locked {self.next_locked} outside [0, {self.n_layers}]")
        if self.tau_epoch < 0:
            raise ContractError(f"tau_epoch must be >= 0, got {self.tau_epoch}")
        if self.threshold <= 0:
            raise ConfigError(f"threshold must be positive, got {self.threshold}")
        if self.stage_epoch_limit < 1:
            raise ConfigError(f"stage_epoch_limit must be >= 1, got {self.stage_epoch_limit}")
        if self.epoch_in_stage < 1:
            raise ContractError(f"epoch_in_stage counts from 1, got {self.epoch_in_stage}")

    @property
    def in_classification_phase(self) -> bool:
        return self.next_locked >= self.n_layers

    def accumulate_tau(self, batch_l_cos_mean: float) -> "ScheduleState":
        return replace(self, tau_epoch=self.tau_epoch + batch_l_cos_mean)


def active_pairs(mode: ScheduleMode, state: ScheduleState,
                 plan: LayerMatchPlan) -> list[tuple[int, int]]:
    """The (student, teacher) pairs distilled this epoch; empty once all are unlocked."""
    if state.n_layers != plan.n_student:
        raise ContractError(f"state tracks {state.n_layers} layers but plan has {plan.n_student}")
    if state.in_classification_phase:
        return []
    if mode.kind is ScheduleKind.ALL_LAYERS:
        return list(plan.pairs)
    if mode.kind is ScheduleKind.PROGRESSIVE:
        return [plan.pairs[state.next_locked]]
    return list(plan.pairs[: state.next_locked + 1])


def advance(state: ScheduleState) -> ScheduleState:
    """End-of-epoch transition: unlock the next layer if tau < threshold or the
    stage is out of epochs; otherwise keep working on the current layer."""
    if state.in_classification_phase:
        raise ContractError("advance() called in classification phase (all layers unlocked)")
    if state.tau_epoch < state.threshold or state.epoch_in_stage >= state.stage_epoch_limit:
        return replace(state, next_locked=state.next_locked + 1, epoch_in_stage=1, tau_epoch=0.0)
    return replace(state, epoch_in_stage=state.epoch_in_stage + 1, tau_epoch=0.0)


def loss_plan(mode: ScheduleMode, state: ScheduleState) -> set[str]:
    """Loss terms allowed this epoch: internal phase gets {kl, cos} plus the
    mode's extra flags; classification phase gets soft (and hard if flagged)."""
    if state.in_classification_phase:
        terms = {"soft"}
        if mode.hard_during_internal:
            terms.add("hard")
        return terms
    terms = {"kl", "cos"}
    if mode.soft_during_internal:
        terms.add("soft")
    if mode.hard_during_internal:
        terms.add("hard")
    return terms
