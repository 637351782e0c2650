"""Per-sample relative error, uncertainty and 2-std coverage, and test-set means."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import OperatorDataset
from .deeponet import DeepONetArch, forward_grid

HIST_BINS = 40


@dataclass(frozen=True)
class SampleMetrics:
    rel_error: float
    uncertainty: float
    coverage: float


@dataclass
class SuiteMetrics:
    mean_e: float
    mean_q: float
    mean_c: float
    samples: List[SampleMetrics] = field(default_factory=list)
    indices: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_e": self.mean_e, "mean_q": self.mean_q, "mean_c": self.mean_c,
            "n_samples": len(self.samples),
            "samples": [dict(asdict(s), index=i) for i, s in zip(self.indices, self.samples)],
        }


def sample_metrics(truth, mean_pred, std_pred) -> SampleMetrics:
    d = np.asarray(truth, dtype=np.float64)
    mean_pred = np.asarray(mean_pred, dtype=np.float64)
    std_pred = np.asarray(std_pred, dtype=np.float64)
    if not (d.shape == mean_pred.shape == std_pred.shape):
        raise ValueError("truth, mean and std must have equal shapes")
    scale = np.linalg.norm(d)
    if scale == 0:
        raise ValueError("truth has zero norm")
    err = np.abs(d - mean_pred)
    return SampleMetrics(
        rel_error=float(np.linalg.norm(d - mean_pred) / scale),
        uncertainty=float(np.linalg.norm(std_pred) / scale),
        # boundary points count as covered
        coverage=float(np.count_nonzero(err <= 2.0 * std_pred) / d.size),
    )


def aggregate(samples, indices=None) -> SuiteMetrics:
    if not samples:
        raise ValueError("no samples to aggregate")
    e = np.array([s.rel_error for s in samples])
    q = np.array([s.uncertainty for s in samples])
    c = np.array([s.coverage for s in samples])
    idx = list(range(len(samples))) if indices is None else [int(i) for i in indices]
    return SuiteMetrics(float(e.mean()), float(q.mean()), float(c.mean()), list(samples), idx)


def predict_functions(ensemble, arch: DeepONetArch, u_sensors, query_points, chunk: int = 64):
    """Yield ``(row, mean, std)`` for each input function, in chunks of functions."""
    members = getattr(ensemble, "members", ensemble)
    u = np.atleast_2d(u_sensors)
    for f0 in range(0, u.shape[0], chunk):
        preds = forward_grid(members, arch, u[f0:f0 + chunk], query_points)   # (J, F, P)
        mean = preds.mean(axis=0)
        std = preds.std(axis=0, ddof=1)
        for r in range(mean.shape[0]):
            yield f0 + r, mean[r], std[r]


def suite_metrics(test: OperatorDataset, ensemble, arch: DeepONetArch, split: str = "test",
                  chunk: Optional[int] = None) -> SuiteMetrics:
    idx = test.splits.get(split)
    if idx is None or idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    if chunk is None:
        # keep the (J, F, P) prediction block near 32M values
        J = np.asarray(getattr(ensemble, "members", ensemble)).shape[0]
        chunk = max(1, (1 << 25) // max(1, J * test.n_query))
    samples = []
    for r, mean, std in predict_functions(ensemble, arch, test.u_sensors[idx], test.query_points, chunk):
        samples.append(sample_metrics(test.outputs[idx[r]], mean, std))
    return aggregate(samples, idx)


def log_histograms(suite: SuiteMetrics, bins: int = HIST_BINS):
    """Counts of log10 relative error and log10 uncertainty over one shared range."""
    e = np.array([s.rel_error for s in suite.samples])
    q = np.array([s.uncertainty for s in suite.samples])
    vals = np.log10(np.concatenate([e, q])[np.concatenate([e, q]) > 0])
    lo, hi = (vals.min(), vals.max()) if vals.size else (-1.0, 0.0)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    with np.errstate(divide="ignore"):
        he, _ = np.histogram(np.log10(e[e > 0]), edges)
        hq, _ = np.histogram(np.log10(q[q > 0]), edges)
    return edges, he, hq


def write_outputs(suite: SuiteMetrics, directory) -> None:
    """metrics.json, scatter.csv and hist.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metrics.json").write_text(json.dumps(suite.to_dict(), indent=2) + "\n")
    with open(directory / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "rel_error", "uncertainty"])
        for i, s in zip(suite.indices, suite.samples):
            w.writerow([i, repr(s.rel_error), repr(s.uncertainty)])
    edges, he, hq = log_histograms(suite)
    with open(directory / "hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo_log10", "bin_hi_log10", "rel_error_count", "uncertainty_count"])
        for k in range(he.size):
            w.writerow([repr(float(edges[k])), repr(float(edges[k + 1])), int(he[k]), int(hq[k])])
