"""Mini-batch Ensemble Kalman Inversion for DeepONet ensembles."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg

from .adaptive_q import QController, f_metric
from .core import Ensemble, OperatorDataset
from .deeponet import DeepONetArch, forward_ensemble, param_count
from .stopping import STOP, Stopper, raw_discrepancy

log = logging.getLogger(__name__)

# Stream identifiers mixed into the seed so each random quantity gets its own stream.
PRIOR, PERTURB, OBS_NOISE, SAMPLER = 1, 2, 3, 4
_SPLIT_CODES = {"train": 0, "q_learn": 1, "stop": 2, "test": 3}

_JITTERS = (0.0, 1e-12, 1e-10, 1e-8)
_COLUMN_BLOCK = 4096


class EkiError(RuntimeError):
    """Raised when the Kalman gain cannot be formed (degenerate ensemble)."""


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *keys)``."""
    return np.random.default_rng([int(seed), purpose, *(int(k) for k in keys)])


@dataclass(frozen=True)
class EkiConfig:
    J: int = 5000
    batch_train: int = 500
    batch_q: int = 500
    batch_stop: int = 500
    omega0: float = 0.01
    max_iterations: int = 5000
    rng_seed: int = 0

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("ensemble size J must be at least 2")
        if min(self.batch_train, self.batch_q, self.batch_stop) < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")

    def check_against(self, dataset: OperatorDataset) -> None:
        for split, size in (("train", self.batch_train), ("q_learn", self.batch_q),
                            ("stop", self.batch_stop)):
            volume = dataset.splits.get(split, np.empty(0)).size * dataset.n_query
            if volume == 0:
                raise ValueError(f"split {split!r} is empty")
            if size > volume:
                raise ValueError(f"batch size {size} exceeds the {volume} observations in split {split!r}")


@dataclass
class Batch:
    """Observations selected for one update.

    ``pairs`` rows are ``(function index, query index)`` into the dataset.
    """
    pairs: np.ndarray
    y: np.ndarray
    r_diag: np.ndarray

    def __post_init__(self):
        if not (len(self.pairs) == len(self.y) == len(self.r_diag)):
            raise ValueError("pairs, observations and r_diag must have equal length")
        if np.any(self.r_diag <= 0):
            raise ValueError("observation variances must be positive")

    def __len__(self):
        return len(self.y)


class BatchSampler:
    """Draws (function, query) observations of one split without replacement.

    The pool is reshuffled when exhausted; a batch that straddles two epochs
    still contains distinct observations.
    """

    def __init__(self, dataset: OperatorDataset, split: str, rng: np.random.Generator):
        self.dataset = dataset
        self.functions = dataset.splits.get(split, np.empty(0, dtype=np.int64))
        self.n_total = self.functions.size * dataset.n_query
        if self.n_total == 0:
            raise ValueError(f"split {split!r} is empty")
        self.rng = rng
        self.epoch = 0
        self._pool = np.empty(0, dtype=np.int64)
        self._next = 0

    def _refill(self):
        self._pool = self.rng.permutation(self.n_total)
        self._next = 0
        self.epoch += 1

    def draw(self, size: int) -> Batch:
        if not 1 <= size <= self.n_total:
            raise ValueError(f"batch size {size} not in [1, {self.n_total}]")
        avail = self._pool.size - self._next
        if avail >= size:
            flat = self._pool[self._next:self._next + size]
            self._next += size
        else:
            head = self._pool[self._next:]
            self._refill()
            fresh = ~np.isin(self._pool, head)
            take = np.flatnonzero(fresh)[:size - head.size]
            keep = np.ones(self._pool.size, dtype=bool)
            keep[take] = False
            flat = np.concatenate([head, self._pool[take]])
            self._pool = self._pool[keep]
        return self.gather(flat)

    def gather(self, flat) -> Batch:
        ds = self.dataset
        local, k = np.divmod(np.asarray(flat, dtype=np.int64), ds.n_query)
        l = self.functions[local]
        return Batch(np.stack([l, k], axis=1), ds.outputs[l, k].copy(), ds.sigma[l] ** 2)


def draw_batch(sampler: BatchSampler, size: int) -> Batch:
    return sampler.draw(size)


def init_prior(arch, config: EkiConfig) -> Ensemble:
    """J members with i.i.d. standard normal entries.

    ``arch`` is a DeepONetArch or a plain parameter count.
    """
    if isinstance(arch, DeepONetArch):
        n, fingerprint = param_count(arch), arch.fingerprint()
    else:
        n, fingerprint = int(arch), ""
    members = stream(config.rng_seed, PRIOR).standard_normal((config.J, n))
    return Ensemble(members, 0, config.rng_seed, fingerprint, copy=False)


def perturb(ensemble: Ensemble, omega: float, rng: np.random.Generator) -> Ensemble:
    """Add N(0, omega**2 I) to every member."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    if omega == 0:
        return ensemble.replace(ensemble.members.copy())
    noise = rng.standard_normal(ensemble.members.shape)
    noise *= omega
    noise += ensemble.members
    return ensemble.replace(noise)


def anomalies(x: np.ndarray) -> np.ndarray:
    """Rows minus their mean, scaled by 1/sqrt(J-1)."""
    J = x.shape[0]
    return (x - x.mean(axis=0)) / math.sqrt(J - 1)


def _factor(cyy: np.ndarray, r_diag: np.ndarray):
    s = cyy.copy()
    s[np.diag_indices_from(s)] += r_diag
    scale = float(np.mean(np.diag(s)))
    for jitter in _JITTERS:
        try:
            if jitter:
                t = s.copy()
                t[np.diag_indices_from(t)] += jitter * scale
            else:
                t = s
            return linalg.cho_factor(t, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
    raise EkiError("C_yy + R is not positive definite even after jitter; ensemble is degenerate")


def kalman_update(prior: Ensemble, predictions, batch: Batch, rng: Optional[np.random.Generator] = None,
                  deterministic_noise: bool = False) -> Ensemble:
    """One perturbed-observation Kalman step on a batch.

    Parameters
    ----------
    prior : Ensemble
        Perturbed ensemble whose predictions are given.
    predictions : array (J, N_y)
        Row ``j`` is the observation operator applied to member ``j``.
    batch : Batch
    rng : Generator
        Source of the observation perturbations; unused when
        ``deterministic_noise`` is set.

    Notes
    -----
    The gain is applied in factored form: with anomaly matrices A_theta
    (J, N_theta) and A_y (J, N_y), solve (A_y^T A_y + R) Z = residuals^T and
    add (A_y Z)^T A_theta. The (N_theta, N_y) cross covariance is never held
    in full.
    """
    theta = prior.members
    yhat = np.asarray(predictions, dtype=np.float64)
    J = theta.shape[0]
    if yhat.shape != (J, len(batch)):
        raise ValueError(f"predictions shape {yhat.shape} != ({J}, {len(batch)})")
    if J < 2:
        raise ValueError("need at least two members")

    ay = anomalies(yhat)
    resid = batch.y - yhat
    if not deterministic_noise:
        if rng is None:
            raise ValueError("rng is required unless deterministic_noise is set")
        resid += rng.standard_normal(resid.shape) * np.sqrt(batch.r_diag)
    factor = _factor(ay.T @ ay, batch.r_diag)
    z = linalg.cho_solve(factor, resid.T)          # (N_y, J)
    n_y = len(batch)
    out = theta.copy()
    # A_y has zero column sums, so A_y^T A_theta == A_y^T theta / sqrt(J-1)
    ay_scaled = ay / math.sqrt(J - 1)
    if 2 * n_y < J:
        # (A_y Z)^T A_theta == Z^T (A_y^T A_theta), evaluated in column blocks
        for c0 in range(0, theta.shape[1], _COLUMN_BLOCK):
            block = theta[:, c0:c0 + _COLUMN_BLOCK]
            out[:, c0:c0 + _COLUMN_BLOCK] += z.T @ (ay_scaled.T @ block)
    else:
        out += (ay_scaled @ z).T @ theta
    return prior.replace(out)


def predict(ensemble, arch: DeepONetArch, u_star, query_points):
    """Ensemble mean and unbiased std of the prediction at each query point."""
    members = getattr(ensemble, "members", ensemble)
    if np.asarray(members).shape[0] < 2:
        raise ValueError("std needs at least two members")
    u = np.asarray(u_star, dtype=np.float64).reshape(1, -1)
    y = np.asarray(query_points, dtype=np.float64).reshape(-1, arch.trunk_dims[0])
    pairs = np.stack([np.zeros(y.shape[0], dtype=np.int64), np.arange(y.shape[0])], axis=1)
    preds = forward_ensemble(members, arch, u, y, pairs)
    return preds.mean(axis=0), preds.std(axis=0, ddof=1)


class DeepONetObservation:
    """Observation operator H(theta) of a DeepONet on dataset (function, query) pairs."""

    def __init__(self, arch: DeepONetArch):
        self.arch = arch

    @property
    def n_params(self) -> int:
        return param_count(self.arch)

    @property
    def fingerprint(self) -> str:
        return self.arch.fingerprint()

    def __call__(self, members, dataset: OperatorDataset, pairs) -> np.ndarray:
        return forward_ensemble(members, self.arch, dataset.u_sensors, dataset.query_points, pairs)


@dataclass
class TrainReport:
    iterations: int = 0
    stop_reason: str = "max_iterations"
    best_iteration: int = 0
    omega: List[float] = field(default_factory=list)
    f_metric: List[float] = field(default_factory=list)
    raw_discrepancy: List[float] = field(default_factory=list)
    smoothed_discrepancy: List[float] = field(default_factory=list)
    iteration_seconds: List[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    TIMING_FIELDS = ("iteration_seconds", "wall_seconds")

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic_part(self) -> dict:
        d = self.to_dict()
        for k in self.TIMING_FIELDS:
            d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "TrainReport":
        return cls(**d)


def train(dataset: OperatorDataset, model, config: EkiConfig, q_controller=None,
          stopper: Optional[Stopper] = None, initial: Optional[Ensemble] = None):
    """Run mini-batch EKI and return ``(best ensemble, TrainReport)``.

    Parameters
    ----------
    model : DeepONetArch or callable
        Either an architecture or an observation operator
        ``model(members, dataset, pairs) -> (J, N_y)`` with ``n_params`` and
        ``fingerprint`` attributes.
    q_controller : QController or FixedQ, optional
        Supplies omega each iteration; defaults to adaptive learning from
        ``config.omega0``.
    stopper : Stopper, optional
        Early-stopping state machine; defaults to W=10, K=100.

    Each iteration perturbs the ensemble, updates it on a fresh training
    batch, scores it on a q_learn batch (omega update) and a stop batch
    (discrepancy). The returned ensemble is the one at the lowest smoothed
    discrepancy.
    """
    if isinstance(model, DeepONetArch):
        model = DeepONetObservation(model)
    q_controller = q_controller if q_controller is not None else QController(config.omega0)
    stopper = stopper if stopper is not None else Stopper()
    config.check_against(dataset)

    if initial is None:
        members = init_prior(model.n_params, config).members
        initial = Ensemble(members, 0, config.rng_seed, model.fingerprint, copy=False)
    ensemble = initial
    if ensemble.n_params != model.n_params:
        raise ValueError("initial ensemble does not match the model's parameter count")

    samplers = {
        name: BatchSampler(dataset, name, stream(config.rng_seed, SAMPLER, _SPLIT_CODES[name]))
        for name in ("train", "q_learn", "stop")
    }
    report = TrainReport()
    best = ensemble
    t_start = time.perf_counter()

    for i in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        omega = q_controller.omega
        prior = perturb(ensemble, omega, stream(config.rng_seed, PERTURB, i))
        batch = samplers["train"].draw(config.batch_train)
        yhat = model(prior.members, dataset, batch.pairs)
        ensemble = kalman_update(prior, yhat, batch, stream(config.rng_seed, OBS_NOISE, i))
        ensemble = ensemble.replace(ensemble.members, iteration=i)

        qb = samplers["q_learn"].draw(config.batch_q)
        sb = samplers["stop"].draw(config.batch_stop)
        preds = model(ensemble.members, dataset, np.concatenate([qb.pairs, sb.pairs]))
        pq, ps = preds[:, :len(qb)], preds[:, len(qb):]
        f = f_metric(qb.y, pq.mean(axis=0), pq.std(axis=0, ddof=1))
        q_controller.update(f)
        decision = stopper.observe(raw_discrepancy(sb.y, ps.mean(axis=0), sb.r_diag), i)
        if stopper.improved:
            best = ensemble

        report.iterations = i
        report.omega.append(omega)
        report.f_metric.append(f)
        report.raw_discrepancy.append(stopper.state.raw_history[-1])
        report.smoothed_discrepancy.append(stopper.state.smoothed)
        report.iteration_seconds.append(time.perf_counter() - t0)
        if i % 50 == 0:
            log.info("iter %d omega=%.4g f=%.3f D~=%.4g best@%d", i, omega, f,
                     stopper.state.smoothed, stopper.state.best_iteration)
        if decision == STOP:
            report.stop_reason = "converged"
            break

    report.best_iteration = best.iteration
    report.wall_seconds = time.perf_counter() - t_start
    return best, report
