"""DeepONet evaluation for single parameter vectors and whole ensembles.

The flat parameter layout is: branch layers first, each as a row-major
``(fan_out, fan_in)`` weight matrix followed by its bias, then the trunk
layers in the same way. Hidden layers are activated, the last layer of
each subnet is linear, and the prediction is the plain dot product of the
branch and trunk features.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

_ACTIVATIONS = {
    "relu": lambda h: np.maximum(h, 0.0, out=h),
    "tanh": lambda h: np.tanh(h, out=h),
}

# Elements per hidden workspace when evaluating ensembles in member chunks.
_WORKSPACE = 1 << 18


@dataclass(frozen=True)
class DeepONetArch:
    branch_dims: Tuple[int, ...]
    trunk_dims: Tuple[int, ...]
    branch_activation: str = "relu"
    trunk_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "branch_dims", tuple(int(d) for d in self.branch_dims))
        object.__setattr__(self, "trunk_dims", tuple(int(d) for d in self.trunk_dims))
        for name in ("branch_dims", "trunk_dims"):
            dims = getattr(self, name)
            if len(dims) < 2:
                raise ValueError(f"{name} needs an input and an output width")
            if min(dims) < 1:
                raise ValueError(f"{name} widths must be >= 1, got {dims}")
        if self.branch_dims[-1] != self.trunk_dims[-1]:
            raise ValueError("branch and trunk must end in the same feature dimension")
        for act in (self.branch_activation, self.trunk_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n(self) -> int:
        return self.branch_dims[-1]

    def to_dict(self) -> dict:
        return {
            "branch_dims": list(self.branch_dims),
            "trunk_dims": list(self.trunk_dims),
            "branch_activation": self.branch_activation,
            "trunk_activation": self.trunk_activation,
        }

    @classmethod
    def from_dict(cls, d) -> "DeepONetArch":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_arch(m: int = 100, d_y: int = 1, width: int = 128, depth: int = 3) -> DeepONetArch:
    """Three linear layers per subnet: ReLU branch, Tanh trunk."""
    hidden = [width] * depth
    return DeepONetArch((m, *hidden), (d_y, *hidden))


def _layer_shapes(dims: Sequence[int]) -> List[Tuple[int, int]]:
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def param_count(arch: DeepONetArch) -> int:
    return sum(o * i + o for dims in (arch.branch_dims, arch.trunk_dims)
               for o, i in _layer_shapes(dims))


def _offsets(arch: DeepONetArch):
    """Yield (net, fan_out, fan_in, weight offset, bias offset)."""
    pos = 0
    for net, dims in (("branch", arch.branch_dims), ("trunk", arch.trunk_dims)):
        for o, i in _layer_shapes(dims):
            yield net, o, i, pos, pos + o * i
            pos += o * i + o


def unpack(theta, arch: DeepONetArch) -> dict:
    """Split a flat parameter vector into ``{"branch": [(W, b), ...], "trunk": [...]}``.

    Arrays are views into ``theta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != param_count(arch):
        raise ValueError(f"theta has length {theta.size}, architecture needs {param_count(arch)}")
    layers = {"branch": [], "trunk": []}
    for net, o, i, w0, b0 in _offsets(arch):
        layers[net].append((theta[w0:b0].reshape(o, i), theta[b0:b0 + o]))
    return layers


def pack(layers: dict) -> np.ndarray:
    parts = []
    for net in ("branch", "trunk"):
        for w, b in layers[net]:
            parts.extend((np.ravel(w), np.ravel(b)))
    return np.concatenate(parts).astype(np.float64)


def _ensemble_layers(members: np.ndarray, arch: DeepONetArch):
    """Per-net lists of (W, b) with W of shape (J, out, in), b of shape (J, 1, out)."""
    J = members.shape[0]
    layers = {"branch": [], "trunk": []}
    for net, o, i, w0, b0 in _offsets(arch):
        w = members[:, w0:b0].reshape(J, o, i)
        b = members[:, b0:b0 + o].reshape(J, 1, o)
        layers[net].append((w, b))
    return layers


def _mlp(x: np.ndarray, layers, activation: str) -> np.ndarray:
    """x: (F, in) shared across members -> (J, F, out)."""
    act = _ACTIVATIONS[activation]
    h = x
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        h = np.matmul(h, w.transpose(0, 2, 1))
        h += b
        if k < last:
            act(h)
    return h


def _features(members, arch, u, y):
    layers = _ensemble_layers(members, arch)
    bf = _mlp(u, layers["branch"], arch.branch_activation)
    tf = _mlp(y, layers["trunk"], arch.trunk_activation)
    return bf, tf


def _as_members(ensemble) -> np.ndarray:
    members = getattr(ensemble, "members", ensemble)
    members = np.asarray(members, dtype=np.float64)
    if members.ndim == 1:
        members = members[None, :]
    return members


def _check_inputs(members, arch, u, y):
    if members.shape[1] != param_count(arch):
        raise ValueError(f"parameters have length {members.shape[1]}, architecture needs {param_count(arch)}")
    if u.shape[-1] != arch.branch_dims[0]:
        raise ValueError(f"input function has {u.shape[-1]} sensor values, branch expects {arch.branch_dims[0]}")
    if y.shape[-1] != arch.trunk_dims[0]:
        raise ValueError(f"query points have dimension {y.shape[-1]}, trunk expects {arch.trunk_dims[0]}")


def _chunk(J: int, rows: int, arch: DeepONetArch) -> int:
    width = max(max(arch.branch_dims), max(arch.trunk_dims))
    return max(1, min(J, _WORKSPACE // max(1, rows * width)))


def forward_ensemble(ensemble, arch: DeepONetArch, u_sensors, query_points, pairs) -> np.ndarray:
    """Evaluate every member on a batch of (function, query point) pairs.

    Parameters
    ----------
    ensemble : Ensemble or array (J, N_theta)
    u_sensors : array (F, m)
        Candidate input functions.
    query_points : array (Q, d_y)
        Candidate query locations.
    pairs : int array (N_y, 2)
        Rows of ``(function index, query index)``.

    Returns
    -------
    array (J, N_y)
        Row ``j`` is the concatenated observation operator of member ``j``.
    """
    members = _as_members(ensemble)
    u = np.atleast_2d(np.asarray(u_sensors, dtype=np.float64))
    y = np.asarray(query_points, dtype=np.float64).reshape(-1, arch.trunk_dims[0])
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    _check_inputs(members, arch, u, y)
    J = members.shape[0]
    out = np.empty((J, pairs.shape[0]))
    if pairs.shape[0] == 0:
        return out
    funcs, f_inv = np.unique(pairs[:, 0], return_inverse=True)
    queries, q_inv = np.unique(pairs[:, 1], return_inverse=True)
    u_sub, y_sub = u[funcs], y[queries]
    step = _chunk(J, max(funcs.size, queries.size), arch)
    for j0 in range(0, J, step):
        bf, tf = _features(members[j0:j0 + step], arch, u_sub, y_sub)
        for j in range(bf.shape[0]):
            np.einsum("ri,ri->r", bf[j, f_inv], tf[j, q_inv], out=out[j0 + j])
    return out


def forward_grid(ensemble, arch: DeepONetArch, u_sensors, query_points) -> np.ndarray:
    """Evaluate every member on every (function, query point) combination -> (J, F, Q)."""
    members = _as_members(ensemble)
    u = np.atleast_2d(np.asarray(u_sensors, dtype=np.float64))
    y = np.asarray(query_points, dtype=np.float64).reshape(-1, arch.trunk_dims[0])
    _check_inputs(members, arch, u, y)
    J = members.shape[0]
    out = np.empty((J, u.shape[0], y.shape[0]))
    step = _chunk(J, max(u.shape[0], y.shape[0]), arch)
    for j0 in range(0, J, step):
        bf, tf = _features(members[j0:j0 + step], arch, u, y)
        np.matmul(bf, tf.transpose(0, 2, 1), out=out[j0:j0 + step])
    return out


def forward(theta, arch: DeepONetArch, u_sensors, query_points) -> np.ndarray:
    """Prediction of one DeepONet for input ``u_sensors`` at each query point -> (P,)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise ValueError("theta must be a flat parameter vector")
    u = np.asarray(u_sensors, dtype=np.float64)
    if u.ndim != 1:
        raise ValueError("u_sensors must be a vector")
    y = np.asarray(query_points, dtype=np.float64).reshape(-1, arch.trunk_dims[0])
    return forward_grid(theta[None, :], arch, u[None, :], y)[0, 0]
