"""Shared domain types and on-disk formats.

Datasets and ensembles are stored as a directory holding ``manifest.json``
plus one raw little-endian float64 file per array.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "q_learn", "stop", "test")
_DTYPE = np.dtype("<f8")


class DatasetError(ValueError):
    """Raised when a dataset violates an invariant or cannot be read."""


class EnsembleError(ValueError):
    """Raised when an ensemble is malformed or incompatible."""


class FormatVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class FunctionPair:
    u_sensors: np.ndarray
    query_points: np.ndarray
    outputs: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.outputs.shape[0] != self.query_points.shape[0]:
            raise DatasetError("outputs length must equal number of query points")
        if not self.sigma > 0:
            raise DatasetError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class DomainMeta:
    problem: str
    d_x: int = 1
    d_y: int = 1
    d_u: int = 1
    d_s: int = 1
    bounds: tuple = ((0.0, 1.0),)
    counts: Mapping[str, int] = field(default_factory=dict)
    noise_percent: float = 0.0
    rng_seed: int = 0


def _frozen(a, ndim):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise DatasetError(f"expected {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


class OperatorDataset:
    """Input/output function pairs sharing sensors and a query grid.

    Parameters
    ----------
    u_sensors : array (N, m)
        Input functions sampled at the shared sensor locations.
    sensor_locations : array (m, d_x)
    query_points : array (P, d_y)
        Query grid, shared by every pair.
    outputs : array (N, P)
    sigma : array (N,)
        Observation noise std of each pair.
    splits : mapping of split name to index array
    meta : DomainMeta
    """

    def __init__(self, u_sensors, sensor_locations, query_points, outputs, sigma,
                 splits: Mapping[str, Sequence[int]], meta: DomainMeta):
        self.u_sensors = _frozen(u_sensors, 2)
        self.sensor_locations = _frozen(sensor_locations, 2)
        self.query_points = _frozen(query_points, 2)
        self.outputs = _frozen(outputs, 2)
        self.sigma = _frozen(sigma, 1)
        self.splits: Dict[str, np.ndarray] = {}
        for name, idx in splits.items():
            arr = np.asarray(idx, dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            self.splits[name] = arr
        self.meta = meta
        self.validate()

    @property
    def n_pairs(self) -> int:
        return self.u_sensors.shape[0]

    @property
    def m(self) -> int:
        return self.sensor_locations.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_points.shape[0]

    def validate(self) -> None:
        n, m, p = self.n_pairs, self.m, self.n_query
        if self.u_sensors.shape[1] != m * self.meta.d_u:
            raise DatasetError(
                f"u_sensors has width {self.u_sensors.shape[1]}, expected m*d_u = {m * self.meta.d_u}")
        if self.sensor_locations.shape[1] != self.meta.d_x:
            raise DatasetError("sensor_locations width differs from d_x")
        if self.query_points.shape[1] != self.meta.d_y:
            raise DatasetError("query_points width differs from d_y")
        if self.outputs.shape != (n, p):
            raise DatasetError(f"outputs shape {self.outputs.shape} != ({n}, {p})")
        if self.sigma.shape != (n,):
            raise DatasetError(f"sigma shape {self.sigma.shape} != ({n},)")
        if n and not np.all(self.sigma > 0):
            raise DatasetError("every sigma must be positive")
        if p:
            bounds = np.asarray(self.meta.bounds, dtype=np.float64).reshape(-1, 2)
            if bounds.shape[0] != self.meta.d_y:
                raise DatasetError("domain bounds must give one (lo, hi) per query coordinate")
            if np.any(self.query_points < bounds[:, 0]) or np.any(self.query_points > bounds[:, 1]):
                raise DatasetError("query points fall outside the domain box")

        seen: Dict[int, str] = {}
        for name, idx in self.splits.items():
            if name not in SPLIT_NAMES:
                raise DatasetError(f"unknown split {name!r}")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"split {name!r} has indices outside [0, {n})")
            if np.unique(idx).size != idx.size:
                raise DatasetError(f"split {name!r} repeats an index")
            for i in idx.tolist():
                if i in seen:
                    raise DatasetError(f"split {name!r} overlaps split {seen[i]!r} at index {i}")
                seen[i] = name
        for name, count in self.meta.counts.items():
            got = self.splits.get(name, np.empty(0)).size
            if got != count:
                raise DatasetError(f"split {name!r} has {got} pairs, domain_meta declares {count}")

    def pair(self, i: int) -> FunctionPair:
        return FunctionPair(self.u_sensors[i], self.query_points, self.outputs[i], float(self.sigma[i]))

    def __len__(self):
        return self.n_pairs

    def __eq__(self, other):
        if not isinstance(other, OperatorDataset):
            return NotImplemented
        arrays = ("u_sensors", "sensor_locations", "query_points", "outputs", "sigma")
        return (
            all(_same_bytes(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.splits.keys() == other.splits.keys()
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits)
            and _meta_dict(self.meta) == _meta_dict(other.meta)
        )


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1:
            raise EnsembleError("parameter vector must be 1-d")
        if not np.all(np.isfinite(self.values)):
            raise EnsembleError("parameter vector has non-finite entries")

    def __len__(self):
        return self.values.size


class Ensemble:
    """J parameter vectors stored as the rows of a (J, N_theta) array."""

    def __init__(self, members, iteration: int = 0, rng_seed: int = 0,
                 arch_fingerprint: str = "", copy: bool = True):
        # copy=False hands ownership of a fresh float64 array to the ensemble
        members = (np.array(members, dtype=np.float64, order="C") if copy
                   else np.ascontiguousarray(members, dtype=np.float64))
        if members.ndim != 2:
            raise EnsembleError(f"members must be (J, N_theta), got shape {members.shape}")
        if members.shape[0] < 2:
            raise EnsembleError("an ensemble needs at least two members")
        if iteration < 0:
            raise EnsembleError("iteration must be non-negative")
        members.setflags(write=False)
        self.members = members
        self.iteration = int(iteration)
        self.rng_seed = int(rng_seed)
        self.arch_fingerprint = arch_fingerprint

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def n_params(self) -> int:
        return self.members.shape[1]

    def member(self, j: int) -> ParamVector:
        return ParamVector(self.members[j])

    def replace(self, members, iteration: Optional[int] = None) -> "Ensemble":
        return Ensemble(members, self.iteration if iteration is None else iteration,
                        self.rng_seed, self.arch_fingerprint, copy=False)

    def __eq__(self, other):
        if not isinstance(other, Ensemble):
            return NotImplemented
        return (_same_bytes(self.members, other.members)
                and (self.iteration, self.rng_seed, self.arch_fingerprint)
                == (other.iteration, other.rng_seed, other.arch_fingerprint))


def _same_bytes(a, b):
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _meta_dict(meta: DomainMeta) -> dict:
    return {
        "problem": meta.problem,
        "d_x": int(meta.d_x), "d_y": int(meta.d_y), "d_u": int(meta.d_u), "d_s": int(meta.d_s),
        "bounds": [[float(lo), float(hi)] for lo, hi in np.asarray(meta.bounds).reshape(-1, 2)],
        "counts": {k: int(v) for k, v in meta.counts.items()},
        "noise_percent": float(meta.noise_percent),
        "rng_seed": int(meta.rng_seed),
    }


# -- raw array I/O -----------------------------------------------------------

def _write_array(directory: Path, name: str, a: np.ndarray) -> dict:
    fname = f"{name}.f64"
    path = directory / fname
    np.ascontiguousarray(a, dtype=_DTYPE).tofile(path)
    expected = int(np.prod(a.shape)) * _DTYPE.itemsize
    if path.stat().st_size != expected:
        raise OSError(f"short write for {path}: {path.stat().st_size} != {expected} bytes")
    return {"file": fname, "shape": list(a.shape), "dtype": "f64le"}


def _read_array(directory: Path, entry: Mapping, error=DatasetError) -> np.ndarray:
    if entry.get("dtype") != "f64le":
        raise error(f"unsupported dtype {entry.get('dtype')!r}")
    path = directory / entry["file"]
    if not path.is_file():
        raise error(f"missing array file {path}")
    shape = tuple(int(s) for s in entry["shape"])
    count = int(np.prod(shape))
    nbytes = path.stat().st_size
    if nbytes != count * _DTYPE.itemsize:
        raise error(f"{path.name}: {nbytes} bytes on disk, shape {shape} needs {count * _DTYPE.itemsize}")
    return np.fromfile(path, dtype=_DTYPE).reshape(shape).astype(np.float64)


def _read_manifest(directory: Path, error) -> dict:
    path = directory / "manifest.json"
    if not path.is_file():
        raise error(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise error(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise (FormatVersionError if error is DatasetError else error)(
            f"manifest format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    return manifest


def save_dataset(ds: OperatorDataset, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    meta = _meta_dict(ds.meta)
    arrays = {
        name: _write_array(directory, name, getattr(ds, name))
        for name in ("u_sensors", "sensor_locations", "query_points", "outputs", "sigma")
    }
    manifest = {
        "format_version": FORMAT_VERSION,
        "problem": meta["problem"],
        "d_x": meta["d_x"], "d_y": meta["d_y"], "d_u": meta["d_u"], "d_s": meta["d_s"],
        "m": ds.m,
        "arrays": arrays,
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "noise_percent": meta["noise_percent"],
        "rng_seed": meta["rng_seed"],
        "bounds": meta["bounds"],
        "counts": meta["counts"],
    }
    _atomic_write_json(directory / "manifest.json", manifest)
    # read back to catch a manifest that disagrees with what landed on disk
    for entry in arrays.values():
        _read_array(directory, entry)


def load_dataset(path) -> OperatorDataset:
    directory = Path(path)
    manifest = _read_manifest(directory, DatasetError)
    try:
        arrays = {name: _read_array(directory, entry) for name, entry in manifest["arrays"].items()}
        meta = DomainMeta(
            problem=manifest["problem"],
            d_x=manifest["d_x"], d_y=manifest["d_y"], d_u=manifest["d_u"], d_s=manifest["d_s"],
            bounds=tuple(tuple(b) for b in manifest.get("bounds", [[0.0, 1.0]] * manifest["d_y"])),
            counts=dict(manifest.get("counts", {})),
            noise_percent=manifest["noise_percent"],
            rng_seed=manifest["rng_seed"],
        )
        ds = OperatorDataset(
            arrays["u_sensors"], arrays["sensor_locations"], arrays["query_points"],
            arrays["outputs"], arrays["sigma"], manifest["splits"], meta,
        )
    except KeyError as exc:
        raise DatasetError(f"manifest is missing key {exc}") from exc
    if ds.m != manifest["m"]:
        raise DatasetError(f"manifest m={manifest['m']} but sensor_locations has {ds.m} rows")
    return ds


def save_ensemble(ens: Ensemble, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    entry = _write_array(directory, "members", ens.members)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": {"members": entry},
        "iteration": ens.iteration,
        "rng_seed": ens.rng_seed,
        "arch_fingerprint": ens.arch_fingerprint,
    }
    _atomic_write_json(directory / "manifest.json", manifest)


def load_ensemble(path, expected_fingerprint: Optional[str] = None) -> Ensemble:
    directory = Path(path)
    manifest = _read_manifest(directory, EnsembleError)
    fingerprint = manifest.get("arch_fingerprint", "")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise EnsembleError(
            f"ensemble was trained for architecture {fingerprint!r}, "
            f"requested architecture is {expected_fingerprint!r}")
    members = _read_array(directory, manifest["arrays"]["members"], EnsembleError)
    return Ensemble(members, manifest["iteration"], manifest["rng_seed"], fingerprint)


def _atomic_write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
