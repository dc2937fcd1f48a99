"""Small feed-forward network engine.

Dense layers with relu/tanh/linear activations, exact reverse-mode
gradients, Adam, and Polyak-averaged target copies. Everything is
float64 numpy with explicitly seeded initialization, so training runs
are bitwise reproducible and checkpoints round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")

_MAGIC = b"PNT1"
_VERSION = 2


@dataclass
class NormalizationRecord:
    """Frozen per-feature z-score statistics from a training dataset."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std <= 0.0):
            raise ValueError("std entries must be positive")

    @classmethod
    def fit(cls, samples: np.ndarray, std_floor: float = 1e-8):
        samples = np.asarray(samples, dtype=np.float64)
        std = np.maximum(samples.std(axis=0), std_floor)
        return cls(mean=samples.mean(axis=0), std=std)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _scale_by_activation_grad(d_a: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    # Derivatives expressed through the layer output, not the preactivation.
    if kind == "relu":
        return d_a * (out > 0.0)
    if kind == "tanh":
        return d_a * (1.0 - out * out)
    return d_a


class Mlp:
    """Fully-connected network: weights[i] has shape (out, in)."""

    def __init__(self, weights, biases, activations, seed: int = 0):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("layer list lengths disagree")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ValueError("consecutive layer dimensions disagree")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self.seed = seed

    @classmethod
    def create(
        cls,
        dims,
        activations,
        seed: int,
        final_weight_scale: float = 1.0,
        final_bias: float = 0.0,
    ) -> "Mlp":
        """He-style uniform fan-in init with a recorded seed.

        ``final_weight_scale`` shrinks the output layer (used to start
        policies near a known-safe action) and ``final_bias`` offsets it.
        """
        if len(dims) != len(activations) + 1:
            raise ValueError("need len(dims) == len(activations) + 1")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        n_layers = len(activations)
        for i in range(n_layers):
            fan_in = dims[i]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
            b = np.zeros(dims[i + 1])
            if i == n_layers - 1:
                w *= final_weight_scale
                b += final_bias
            weights.append(w)
            biases.append(b)
        return cls(weights, biases, activations, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activations,
            seed=self.seed,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.in_dim:
            raise ValueError(f"input dim {a.shape[1]} != expected {self.in_dim}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = _apply_activation(a @ w.T + b, act)
        return a[0] if squeeze else a

    def forward_cached(self, x: np.ndarray):
        """Forward pass retaining per-layer inputs/outputs for backward."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("forward_cached expects a batch (n, in_dim)")
        if a.shape[1] != self.in_dim:
            raise ValueError(f"input dim {a.shape[1]} != expected {self.in_dim}")
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            out = _apply_activation(a @ w.T + b, act)
            cache.append((a, out))
            a = out
        return a, cache

    def backward(self, cache, d_out: np.ndarray, need_input_grad: bool = False):
        """Exact gradients of sum(d_out * output) w.r.t. parameters.

        Returns (grads, d_input); grads is a list of (dW, db) matching
        the layer order. d_input is None unless requested.
        """
        d_a = np.asarray(d_out, dtype=np.float64)
        grads: list = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev, a_out = cache[i]
            dz = _scale_by_activation_grad(d_a, a_out, self.activations[i])
            grads[i] = (dz.T @ a_prev, dz.sum(axis=0))
            if i > 0 or need_input_grad:
                d_a = dz @ self.weights[i]
        return grads, (d_a if need_input_grad else None)

    def params_digest(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()

    def check_finite(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise FloatingPointError("non-finite network parameters")


class Adam:
    """Standard Adam over an Mlp's parameter list."""

    def __init__(self, mlp: Mlp, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(mlp.weights, mlp.biases)
        ]
        self.v = [
            (np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(mlp.weights, mlp.biases)
        ]

    def step(self, mlp: Mlp, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        eps = self.eps * np.sqrt(1.0 - b2**self.t)
        for i, (dw, db) in enumerate(grads):
            for j, (param, grad) in enumerate(
                ((mlp.weights[i], dw), (mlp.biases[i], db))
            ):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                param -= scale * m / (np.sqrt(v) + eps)


def soft_update(target: Mlp, online: Mlp, rate: float):
    """target <- (1 - rate) * target + rate * online, in place."""
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - rate
        tw += rate * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - rate
        tb += rate * ob


def save_checkpoint(path, mlp: Mlp, norm: NormalizationRecord | None = None, meta: dict | None = None):
    """Portable checkpoint: JSON header + little-endian float64 arrays."""
    header = {
        "shapes": [[int(w.shape[0]), int(w.shape[1])] for w in mlp.weights],
        "activations": mlp.activations,
        "seed": int(mlp.seed),
        "has_norm": norm is not None,
        "norm_dim": int(norm.mean.size) if norm is not None else 0,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(blob)))
        f.write(blob)
        for w, b in zip(mlp.weights, mlp.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if norm is not None:
            f.write(np.ascontiguousarray(norm.mean, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(norm.std, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (mlp, norm_or_None, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen

    def take(n_floats):
        nonlocal off
        nbytes = 8 * n_floats
        if off + nbytes > len(data):
            raise ValueError("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f8", count=n_floats, offset=off).copy()
        off += nbytes
        return arr

    weights, biases = [], []
    for out_d, in_d in header["shapes"]:
        weights.append(take(out_d * in_d).reshape(out_d, in_d))
        biases.append(take(out_d))
    norm = None
    if header["has_norm"]:
        d = header["norm_dim"]
        norm = NormalizationRecord(mean=take(d), std=take(d))
    if off != len(data):
        raise ValueError("checkpoint has trailing bytes")
    mlp = Mlp(weights, biases, header["activations"], seed=header["seed"])
    return mlp, norm, header.get("meta", {})
