"""Adaptive update interval.

The delayed partition is flushed once its accumulated gradient, measured as
the mean per-channel norm of the running sum over unselected channels,
becomes comparable (``>= gamma *``) to the smoothed mean per-channel norm
of the selected channels. A hard cap ``s_max`` bounds staleness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gradcore import column_norms_sq
from .selection import ChannelSelection

__all__ = ["AutoTuneState", "AdaptiveInterval", "comparable", "observe", "record_flush", "should_flush",
           "write_interval_csv"]


@dataclass
class AutoTuneState:
    gamma: float = 1.0
    ema_decay: float = 0.9
    s_min: int = 1
    s_max: int | None = 8
    ema_important_norm: float = 0.0
    accumulated_unimportant_norm: float = 0.0
    rounds: int = 0
    interval_history: list[tuple[int, int]] = field(default_factory=list)
    _initialized: bool = False
    _running: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.s_min < 1 or (self.s_max is not None and self.s_max < self.s_min):
            raise ValueError("need 1 <= s_min <= s_max")


def _pairs(grads, sels):
    if isinstance(sels, ChannelSelection):
        return [(np.asarray(grads, dtype=np.float64), sels)]
    return [(np.asarray(g, dtype=np.float64), s) for g, s in zip(grads, sels)]


def observe(state: AutoTuneState, grads, sels) -> AutoTuneState:
    """Fold one step's gradient(s) into ``state`` (mutated and returned).

    ``grads``/``sels`` are one matrix and its selection, or parallel
    sequences for several weight matrices; channels are pooled across them.
    """
    pairs = _pairs(grads, sels)
    if state._running is None or len(state._running) != len(pairs):
        state._running = [np.zeros_like(g) for g, _ in pairs]
    imp_norms, unimp_norms = [], []
    for i, (g, sel) in enumerate(pairs):
        if sel.num_columns is not None and sel.num_columns != g.shape[1]:
            raise ValueError("selection does not match gradient shape")
        cols = np.zeros(g.shape[1], dtype=bool)
        cols[sel.channel_ids] = True
        state._running[i] += g * ~cols[None, :]
        imp_norms.append(np.sqrt(column_norms_sq(g[:, cols])))
        unimp_norms.append(np.sqrt(column_norms_sq(state._running[i][:, ~cols])) if (~cols).any()
                           else np.zeros(0))
    imp = np.concatenate(imp_norms)
    unimp = np.concatenate(unimp_norms)
    current = float(imp.mean()) if imp.size else 0.0
    if not state._initialized:
        state.ema_important_norm = current
        state._initialized = True
    else:
        state.ema_important_norm = state.ema_decay * state.ema_important_norm + (1 - state.ema_decay) * current
    state.accumulated_unimportant_norm = float(unimp.mean()) if unimp.size else 0.0
    state.rounds += 1
    return state


def comparable(state: AutoTuneState) -> bool:
    """Norm criterion alone: accumulated delayed norm has caught up."""
    acc = state.accumulated_unimportant_norm
    return acc > 0.0 and acc >= state.gamma * state.ema_important_norm


def should_flush(state: AutoTuneState) -> bool:
    if state.rounds < state.s_min:
        return False
    if state.s_max is not None and state.rounds >= state.s_max:
        return True
    return comparable(state)


def record_flush(state: AutoTuneState, step: int) -> None:
    """Log the interval that just ended and reset the per-cycle accumulator."""
    if state.rounds:
        state.interval_history.append((step, state.rounds))
    state.rounds = 0
    state.accumulated_unimportant_norm = 0.0
    if state._running is not None:
        for r in state._running:
            r[:] = 0.0


class AdaptiveInterval:
    """Object wrapper around :class:`AutoTuneState` for the training loop."""

    def __init__(self, gamma: float = 1.0, ema_decay: float = 0.9, s_min: int = 1, s_max: int | None = 8):
        self.state = AutoTuneState(gamma=gamma, ema_decay=ema_decay, s_min=s_min, s_max=s_max)

    def observe(self, grads, sels) -> None:
        observe(self.state, grads, sels)

    def should_flush(self) -> bool:
        return should_flush(self.state)

    def record_flush(self, step: int) -> None:
        record_flush(self.state, step)

    @property
    def interval_history(self) -> list[tuple[int, int]]:
        return list(self.state.interval_history)


def write_interval_csv(history: Sequence[tuple[int, int]], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "effective_S"])
        w.writerows(history)
    return path

