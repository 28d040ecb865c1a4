"""How the three distillation schedules unlock layer pairs.

Walks a 4-layer teacher / 2-layer student match plan through the all-layers,
progressive, and stacked schedules with a synthetic cosine-loss trace, and
prints which pairs are active and which loss terms apply each epoch.
"""

from dataclasses import replace

from mdkd import ScheduleKind, ScheduleMode, ScheduleState, match_layers
from mdkd.schedule import active_pairs, advance, loss_plan

plan = match_layers(4, 2)
print("match plan (student layer <- teacher layer):", list(plan.pairs))

# a loss trace that converges quickly in stage 0, slowly afterwards
fake_tau = [0.5, 0.004, 0.3, 0.09, 0.02, 0.008, 0.1, 0.05, 0.001, 0.0, 0.0, 0.0]

for kind in (ScheduleKind.ALL_LAYERS, ScheduleKind.PROGRESSIVE, ScheduleKind.STACKED):
    mode = ScheduleMode(kind, soft_during_internal=(kind is ScheduleKind.ALL_LAYERS))
    state = ScheduleState(n_layers=2, threshold=0.01, stage_epoch_limit=4)
    print(f"\n=== {kind.value} ===")
    for epoch, tau in enumerate(fake_tau, start=1):
        pairs = active_pairs(mode, state, plan)
        terms = sorted(loss_plan(mode, state))
        phase = "classification" if state.in_classification_phase else "internal"
        print(f"epoch {epoch:2d}  phase={phase:14s} next_locked={state.next_locked} "
              f"stage_epoch={state.epoch_in_stage} active={pairs} terms={terms}")
        if kind is ScheduleKind.ALL_LAYERS:
            if epoch == 3:
                print("(no stages; every epoch looks the same)")
                break
            continue
        if not state.in_classification_phase:
            state = advance(replace(state, tau_epoch=tau))
        if state.in_classification_phase and epoch >= 8:
            break
