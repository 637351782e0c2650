"""Early stopping on a window-smoothed held-out discrepancy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CONTINUE = "continue"
STOP = "stop"
_REL_EPS = 1e-12


@dataclass(frozen=True)
class StopperConfig:
    window: int = 10
    patience: int = 100

    def __post_init__(self):
        if self.window < 1 or self.patience < 1:
            raise ValueError("window and patience must be >= 1")


@dataclass(frozen=True)
class StopperState:
    raw_history: tuple = ()
    best_smoothed: float = math.inf
    best_iteration: int = -1
    iterations_since_best: int = 0
    smoothed: float = math.nan
    count: int = 0


def raw_discrepancy(observations, mean_pred, r_diag) -> float:
    """R-weighted squared misfit of the ensemble-mean prediction."""
    resid = np.asarray(observations, dtype=np.float64) - np.asarray(mean_pred, dtype=np.float64)
    return float(np.sum(resid * resid / np.asarray(r_diag, dtype=np.float64)))


def observe(state: StopperState, raw: float, iteration: int, config: StopperConfig):
    """Push one raw discrepancy; return ``(new_state, CONTINUE | STOP)``.

    The smoothed value averages the last ``window`` raw values, or all of
    them while fewer are available. Patience is only consumed once the
    window was already full on the previous call.
    """
    if raw < 0:
        raise ValueError("discrepancy must be non-negative")
    count = state.count + 1
    history = (*state.raw_history, float(raw))[-config.window:]
    smoothed = math.fsum(history) / len(history)
    # rounding in the window mean must not register as an improvement
    if smoothed < state.best_smoothed * (1 - _REL_EPS):
        state = StopperState(history, smoothed, iteration, 0, smoothed, count)
    else:
        waited = state.iterations_since_best + 1 if count > config.window else 0
        state = StopperState(history, state.best_smoothed, state.best_iteration,
                             waited, smoothed, count)
    return state, (STOP if state.iterations_since_best >= config.patience else CONTINUE)


class Stopper:
    def __init__(self, config: StopperConfig = StopperConfig()):
        self.config = config
        self.state = StopperState()
        self._last = None

    def observe(self, raw: float, iteration: int) -> str:
        self.state, decision = observe(self.state, raw, iteration, self.config)
        self._last = iteration
        return decision

    @property
    def improved(self) -> bool:
        """Whether the most recent observation set a new best."""
        return self._last is not None and self.state.best_iteration == self._last


def replay(raw_sequence, config: StopperConfig = StopperConfig()):
    """Run a recorded discrepancy sequence; return (stop iteration or None, final state).

    Iterations are numbered from 1.
    """
    stopper = Stopper(config)
    for i, raw in enumerate(raw_sequence, start=1):
        if stopper.observe(raw, i) == STOP:
            return i, stopper.state
    return None, stopper.state
