"""Benchmark datasets: GP input functions and three reference operators.

All solvers accept a single input function (m,) or a stack (F, m) sampled
on ``m`` equally spaced points of [0, 1], and return outputs on the
100-point (or 100 x 100) query grid.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import integrate, linalg

from .core import DomainMeta, OperatorDataset

N_OUT = 100
SIGMA_FLOOR = 1e-12
_GP_JITTERS = (1.0, 1e2, 1e4, 1e6)


class SolverError(RuntimeError):
    pass


class Problem(str, enum.Enum):
    ANTIDERIVATIVE = "antiderivative"
    PENDULUM = "pendulum"
    REACTION_DIFFUSION = "reaction-diffusion"


@dataclass(frozen=True)
class GpConfig:
    amplitude: float = 1.0
    length_scale: float = 0.2
    m: int = 100
    jitter: float = 1e-10

    def __post_init__(self):
        if not (self.amplitude > 0 and self.length_scale > 0):
            raise ValueError("GP amplitude and length scale must be positive")
        if self.m < 2:
            raise ValueError("need at least two sensors")


@dataclass(frozen=True)
class ProblemSpec:
    kind: Problem = Problem.ANTIDERIVATIVE
    nu: float = 0.01
    k: float = 0.01
    counts: Dict[str, int] = field(default_factory=lambda: {
        "train": 800, "q_learn": 100, "stop": 100, "test": 1000})
    noise_percent: float = 0.01
    n_out: int = N_OUT

    def __post_init__(self):
        object.__setattr__(self, "kind", Problem(self.kind))
        for name in ("train", "q_learn", "stop", "test"):
            if self.counts.get(name, 0) < 1:
                raise ValueError(f"count for split {name!r} must be positive")
        if not self.noise_percent > 0:
            raise ValueError("noise_percent must be positive")


def sensor_grid(m: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, m)


def rbf_kernel(x, x2, amplitude: float, length_scale: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(x, float), np.asarray(x2, float))
    return amplitude ** 2 * np.exp(-0.5 * (d / length_scale) ** 2)


def gp_cholesky(config: GpConfig) -> np.ndarray:
    x = sensor_grid(config.m)
    K = rbf_kernel(x, x, config.amplitude, config.length_scale)
    eye = np.eye(config.m)
    for factor in _GP_JITTERS:
        try:
            return linalg.cholesky(K + factor * config.jitter * eye, lower=True)
        except linalg.LinAlgError:
            continue
    raise linalg.LinAlgError("GP covariance is not positive definite after jitter escalation")


def sample_gp(config: GpConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` zero-mean GP functions at the sensors -> (count, m)."""
    L = gp_cholesky(config)
    return rng.standard_normal((count, config.m)) @ L.T


def _stack(u):
    u = np.asarray(u, dtype=np.float64)
    return (u[None, :], True) if u.ndim == 1 else (u, False)


def solve_antiderivative(u_sensors, n_out: int = N_OUT) -> np.ndarray:
    """s' = u, s(0) = 0 by the cumulative trapezoid rule on the sensor grid.

    Off-sensor outputs integrate the piecewise-linear interpolant of u
    exactly, which agrees with the trapezoid values at the sensors.
    """
    u, single = _stack(u_sensors)
    x = sensor_grid(u.shape[1])
    s = integrate.cumulative_trapezoid(u, x, axis=1, initial=0.0)
    if u.shape[1] != n_out:
        xq = sensor_grid(n_out)
        h = x[1] - x[0]
        i = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, x.size - 2)
        dx = xq - x[i]
        s = s[:, i] + u[:, i] * dx + (u[:, i + 1] - u[:, i]) * dx * dx / (2 * h)
    return s[0] if single else s


def _steps_per_interval(h_max: float, interval: float) -> int:
    return max(1, int(np.ceil(interval / h_max - 1e-12)))


def solve_pendulum(u_sensors, h: float = 1e-3, n_out: int = N_OUT) -> np.ndarray:
    """s'' = -sin(s) + u on [0, 1], s(0) = s'(0) = 0, classical RK4.

    The step is the largest value <= ``h`` that puts both sensors and
    output times on step boundaries, so the piecewise-linear forcing is
    smooth inside every step.
    """
    u, single = _stack(u_sensors)
    m = u.shape[1]
    if (m - 1) % (n_out - 1) and (n_out - 1) % (m - 1):
        raise ValueError("sensor and output grids must nest")
    coarse = max(m, n_out) - 1
    sub = _steps_per_interval(h, 1.0 / coarse)
    n_steps = coarse * sub
    dt = 1.0 / n_steps
    t_grid = np.linspace(0.0, 1.0, n_steps + 1)
    x = sensor_grid(m)
    # forcing at step starts, midpoints and ends
    u_full = np.stack([np.interp(t_grid, x, row) for row in u])
    u_mid = np.stack([np.interp(t_grid[:-1] + dt / 2, x, row) for row in u])

    def rhs(s, v, f):
        return v, -np.sin(s) + f

    s = np.zeros(u.shape[0])
    v = np.zeros(u.shape[0])
    every = n_steps // (n_out - 1)
    out = np.empty((u.shape[0], n_out))
    out[:, 0] = 0.0
    for n in range(n_steps):
        f0, fm, f1 = u_full[:, n], u_mid[:, n], u_full[:, n + 1]
        k1s, k1v = rhs(s, v, f0)
        k2s, k2v = rhs(s + dt / 2 * k1s, v + dt / 2 * k1v, fm)
        k3s, k3v = rhs(s + dt / 2 * k2s, v + dt / 2 * k2v, fm)
        k4s, k4v = rhs(s + dt * k3s, v + dt * k3v, f1)
        s = s + dt / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        v = v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if (n + 1) % every == 0:
            out[:, (n + 1) // every] = s
    return out[0] if single else out


def solve_reaction_diffusion(u_sensors, nu: float = 0.01, k: float = 0.01, dt: float = 1e-3,
                             n_x: Optional[int] = None, n_out: int = N_OUT) -> np.ndarray:
    """s_t = nu s_xx + k s^2 + u(x) on [0, 1]^2, zero initial and boundary values.

    Method of lines with central differences on ``n_x`` points (default: the
    output grid), Crank-Nicolson diffusion and explicit reaction/forcing.
    Returns ``(n_out, n_out)`` per function indexed ``[x, t]``, or a stack
    ``(F, n_out, n_out)``.
    """
    u, single = _stack(u_sensors)
    n_x = n_out if n_x is None else n_x
    if (n_x - 1) % (n_out - 1):
        raise ValueError("internal grid must refine the output grid")
    xs = sensor_grid(n_x)
    x_sensors = sensor_grid(u.shape[1])
    forcing = np.stack([np.interp(xs, x_sensors, row) for row in u])[:, 1:-1]   # interior
    n_in = n_x - 2
    dx = 1.0 / (n_x - 1)
    sub = _steps_per_interval(dt, 1.0 / (n_out - 1))
    dt = 1.0 / ((n_out - 1) * sub)
    lam = nu * dt / (2 * dx * dx)
    # banded (I - lam*D2); explicit side applies (I + lam*D2)
    ab = np.zeros((3, n_in))
    ab[0, 1:] = -lam
    ab[1, :] = 1 + 2 * lam
    ab[2, :-1] = -lam

    s = np.zeros((n_in, u.shape[0]))
    f = forcing.T
    stride = (n_x - 1) // (n_out - 1)
    picks = np.arange(1, n_out - 1) * stride - 1
    out = np.zeros((u.shape[0], n_out, n_out))
    for n in range(1, (n_out - 1) * sub + 1):
        rhs = (1 - 2 * lam) * s
        rhs[1:] += lam * s[:-1]
        rhs[:-1] += lam * s[1:]
        rhs += dt * (k * s * s + f)
        s = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        if n % sub == 0:
            if not np.all(np.isfinite(s)):
                raise SolverError(f"reaction-diffusion state diverged at t={n * dt:.4f}")
            out[:, 1:-1, n // sub] = s[picks].T
    return out[0] if single else out


def corrupt(outputs, noise_percent: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Add N(0, sigma^2) noise with sigma = noise_percent * max|outputs|."""
    s = np.asarray(outputs, dtype=np.float64)
    if s.size == 0:
        raise ValueError("outputs are empty")
    peak = float(np.max(np.abs(s)))
    sigma = noise_percent * peak
    if sigma == 0:
        return s.copy(), SIGMA_FLOOR
    return s + sigma * rng.standard_normal(s.shape), sigma


def query_grid(kind: Problem, n_out: int = N_OUT) -> np.ndarray:
    g = sensor_grid(n_out)
    if kind is Problem.REACTION_DIFFUSION:
        xx, tt = np.meshgrid(g, g, indexing="ij")
        return np.stack([xx.ravel(), tt.ravel()], axis=1)
    return g[:, None]


def solve(spec: ProblemSpec, u) -> np.ndarray:
    """Clean outputs flattened to (F, P) in query-grid order."""
    u = np.atleast_2d(u)
    if spec.kind is Problem.ANTIDERIVATIVE:
        return solve_antiderivative(u, n_out=spec.n_out)
    if spec.kind is Problem.PENDULUM:
        return solve_pendulum(u, n_out=spec.n_out)
    s = solve_reaction_diffusion(u, spec.nu, spec.k, n_out=spec.n_out)
    return s.reshape(u.shape[0], -1)


def _pair_rng(seed: int, side: int, index: int, what: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), side, index, what])


def _generate(spec: ProblemSpec, gp: GpConfig, seed: int, side: int, n: int, noisy: bool):
    L = gp_cholesky(gp)
    u = np.stack([_pair_rng(seed, side, i, 0).standard_normal(gp.m) @ L.T for i in range(n)])
    clean = solve(spec, u)
    outputs = np.empty_like(clean)
    sigma = np.empty(n)
    for i in range(n):
        rng = _pair_rng(seed, side, i, 1)
        noisy_i, sigma[i] = corrupt(clean[i], spec.noise_percent, rng)
        outputs[i] = noisy_i if noisy else clean[i]
    return u, clean, outputs, sigma


def build_dataset(spec: ProblemSpec, gp: GpConfig = GpConfig(), seed: int = 0):
    """Return ``(generation-side dataset, test dataset)``.

    The generation side holds noisy outputs split into train/q_learn/stop;
    the test side holds clean outputs under a single ``test`` split, with
    each pair's sigma still recorded.
    """
    c = spec.counts
    n_gen = c["train"] + c["q_learn"] + c["stop"]
    d_y = 2 if spec.kind is Problem.REACTION_DIFFUSION else 1
    bounds = ((0.0, 1.0),) * d_y
    sensors = sensor_grid(gp.m)[:, None]
    queries = query_grid(spec.kind, spec.n_out)

    u, _, noisy, sigma = _generate(spec, gp, seed, 0, n_gen, noisy=True)
    splits = {
        "train": np.arange(c["train"]),
        "q_learn": np.arange(c["train"], c["train"] + c["q_learn"]),
        "stop": np.arange(c["train"] + c["q_learn"], n_gen),
    }
    meta = DomainMeta(spec.kind.value, 1, d_y, 1, 1, bounds,
                      {k: c[k] for k in ("train", "q_learn", "stop")},
                      spec.noise_percent, seed)
    gen = OperatorDataset(u, sensors, queries, noisy, sigma, splits, meta)

    ut, _, clean, sigma_t = _generate(spec, gp, seed, 1, c["test"], noisy=False)
    meta_t = DomainMeta(spec.kind.value, 1, d_y, 1, 1, bounds, {"test": c["test"]},
                        spec.noise_percent, seed)
    test = OperatorDataset(ut, sensors, queries, clean, sigma_t, {"test": np.arange(c["test"])}, meta_t)
    return gen, test
