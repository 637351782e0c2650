"""Online learning of the artificial-dynamics scale omega, where Q = omega**2 * I.

After each EKI iteration the ensemble is scored on a held-out batch by the
signed gap between its predictive spread and its mean misfit. A running
median of that gap over a window decides whether omega grows, shrinks, or
stays put.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QControllerConfig:
    alpha: float = 0.05
    tau: float = 0.1
    window: int = 10
    omega_min: float = 1e-8
    omega_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0 < self.omega_min < self.omega_max:
            raise ValueError("need 0 < omega_min < omega_max")


@dataclass(frozen=True)
class QControllerState:
    omega: float
    f_history: tuple = ()


def f_metric(observations, mean_pred, std_pred) -> float:
    """(||std|| - ||observations - mean||) / ||observations||.

    Negative values mean the ensemble is overconfident.
    """
    d = np.asarray(observations, dtype=np.float64)
    scale = np.linalg.norm(d)
    if scale == 0:
        raise ValueError("observations have zero norm")
    spread = np.linalg.norm(std_pred)
    misfit = np.linalg.norm(d - np.asarray(mean_pred, dtype=np.float64))
    return float((spread - misfit) / scale)


def update_omega(state: QControllerState, f_new: float, config: QControllerConfig) -> QControllerState:
    history = (*state.f_history, float(f_new))[-(config.window + 1):]
    omega = state.omega
    if len(history) == config.window + 1:
        med = float(np.median(history))
        if med < -config.tau:
            omega = omega * (1 + config.alpha)
        elif med >= config.tau:
            omega = omega * (1 - config.alpha)
        omega = min(max(omega, config.omega_min), config.omega_max)
    return QControllerState(omega=omega, f_history=history)


class QController:
    """Mutable wrapper the trainer steps once per iteration."""

    def __init__(self, omega0: float, config: QControllerConfig = QControllerConfig()):
        if not config.omega_min <= omega0 <= config.omega_max:
            raise ValueError(f"omega0={omega0} outside [{config.omega_min}, {config.omega_max}]")
        self.config = config
        self.state = QControllerState(omega=float(omega0))

    @property
    def omega(self) -> float:
        return self.state.omega

    def update(self, f_new: float) -> float:
        self.state = update_omega(self.state, f_new, self.config)
        return self.state.omega


class FixedQ:
    """Holds omega constant; used for fixed-covariance runs."""

    def __init__(self, omega: float):
        if omega < 0:
            raise ValueError("omega must be non-negative")
        self.omega = float(omega)

    def update(self, f_new: float) -> float:
        return self.omega
