from __future__ import annotations

import math


def one_cycle_lr(step: int, total_steps: int, peak_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 100.0) -> float:
    """Linear warmup from peak/div_factor to peak over the first ``pct_start`` of
    steps, then cosine annealing down to peak/final_div_factor at the last step."""
    if total_steps < 2:
        raise ValueError("one-cycle schedule needs at least two steps")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial = peak_lr / div_factor
    final = peak_lr / final_div_factor
    peak_step = peak_step_of(total_steps, pct_start)
    if step == peak_step:
        return peak_lr
    if step < peak_step:
        return initial + (peak_lr - initial) * step / peak_step
    t = (step - peak_step) / (total_steps - 1 - peak_step)
    return final + (peak_lr - final) * 0.5 * (1 + math.cos(math.pi * t))


def peak_step_of(total_steps: int, pct_start: float = 0.3) -> int:
    return min(max(int(pct_start * total_steps), 1), total_steps - 2)
