"""MLPs, categorical sampling, Adam, and flat-blob parameter serialization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

HIDDEN_GAIN = np.sqrt(2.0)
OUTPUT_GAIN = 0.01


def init_mlp_params(
    sizes: Sequence[int], rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Scaled-uniform init: gain sqrt(2) on hidden layers, 0.01 on the output."""
    params = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        gain = OUTPUT_GAIN if i == len(sizes) - 2 else HIDDEN_GAIN
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        params.append((w, b))
    return params


class Mlp:
    """A tanh-hidden multilayer perceptron over flat float64 vectors.

    Parameters live as leaf Tensors so one network object serves both the
    graph-building forward (updates) and the raw-numpy forward (rollouts).
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 hidden_activation: str = "tanh"):
        self.sizes = list(sizes)
        self.hidden_activation = hidden_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for w, b in init_mlp_params(sizes, rng):
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    @property
    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_requires_grad(self, flag: bool):
        for p in self.parameters:
            p.requires_grad = flag

    def _check_input(self, x: np.ndarray):
        if x.shape[-1] != self.sizes[0]:
            raise DimensionError(
                f"layer 0 expects input width {self.sizes[0]}, got {x.shape[-1]}"
            )

    def _act(self, h: Tensor) -> Tensor:
        return h.tanh() if self.hidden_activation == "tanh" else h.relu()

    def forward(self, x, return_hidden: bool = False):
        """Graph-building forward. Accepts a Tensor or ndarray of shape (B, in)."""
        h = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        self._check_input(h.data)
        last_hidden = None
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.data.shape[-1] != w.data.shape[0]:
                raise DimensionError(
                    f"layer {i} expects input width {w.data.shape[0]}, "
                    f"got {h.data.shape[-1]}"
                )
            h = h @ w + b
            if i < n - 1:
                h = self._act(h)
                last_hidden = h
        if return_hidden:
            return h, last_hidden
        return h

    def forward_np(self, x: np.ndarray, return_hidden: bool = False):
        """Raw-numpy forward without the tape; bit-identical to forward()."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._check_input(h)
        last_hidden = None
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < n - 1:
                h = np.tanh(h) if self.hidden_activation == "tanh" else np.maximum(h, 0.0)
                last_hidden = h
        if not np.isfinite(h).all():
            raise ContractError("forward_np produced non-finite output")
        if return_hidden:
            return h, last_hidden
        return h

    def get_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters]

    def set_arrays(self, arrays: Sequence[np.ndarray]):
        for p, a in zip(self.parameters, arrays, strict=True):
            if p.data.shape != a.shape:
                raise DimensionError(f"parameter shape {p.data.shape} != {a.shape}")
            p.data = np.array(a, dtype=np.float64)

    def clone(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.sizes = list(self.sizes)
        dup.hidden_activation = self.hidden_activation
        dup.weights = [Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        dup.biases = [Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return dup


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax; output sums to 1 along the last axis."""
    if not np.isfinite(logits).all():
        raise ContractError("softmax: non-finite logits")
    return ad.softmax_np(np.asarray(logits, dtype=np.float64))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Sample an index from a probability vector; reproducible given rng."""
    p = np.asarray(probs, dtype=np.float64)
    total = p.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise ContractError("sample_categorical: degenerate distribution")
    cdf = np.cumsum(p / total)
    u = rng.random()
    return int(np.searchsorted(cdf, u, side="right").clip(0, len(p) - 1))


def sample_categorical_batch(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    totals = p.sum(axis=-1, keepdims=True)
    if (totals <= 0.0).any() or not np.isfinite(totals).all():
        raise ContractError("sample_categorical: degenerate distribution")
    cdf = np.cumsum(p / totals, axis=-1)
    u = rng.random(p.shape[0])[:, None]
    return (u < cdf).argmax(axis=-1)


@dataclass
class Adam:
    """Adam with bias correction, one slot pair per tracked parameter."""

    params: list[Tensor]
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}"
                )
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint l2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def save_params(path, named_arrays: dict[str, np.ndarray]):
    """Write a flat little-endian float64 blob plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(path, "wb") as f:
        for name, arr in named_arrays.items():
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            f.write(blob)
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(blob)
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".manifest.json")) as f:
        manifest = json.load(f)
    raw = path.read_bytes()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def mlp_named_arrays(mlp: Mlp, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}w{i}"] = w.data
        out[f"{prefix}b{i}"] = b.data
    return out


def load_mlp_arrays(mlp: Mlp, named: dict[str, np.ndarray], prefix: str = ""):
    arrays = []
    for i in range(len(mlp.weights)):
        arrays.extend((named[f"{prefix}w{i}"], named[f"{prefix}b{i}"]))
    mlp.set_arrays(arrays)
