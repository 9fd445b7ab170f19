"""Small rectifier MLP with hand-written backprop, SGD and checkpoints.

The MLP is the shared backbone for both the supervised and the
self-supervised trainers.  Weights are stored ``(out, in)`` so a layer
computes ``a @ W.T + b`` on a row-major batch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numeric import DivergedError, RngStream, as_matrix

CHECKPOINT_MAGIC = b"FSLM"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file on disk does not follow the expected binary/CSV layout."""


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != want:
                raise ValueError(f"weights[{i}] has shape {w.shape}, expected {want}")
            if b.shape != (want[0],):
                raise ValueError(f"biases[{i}] has shape {b.shape}, expected {(want[0],)}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[np.ndarray]:
        """Parameters as a flat list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, layer_dims, tensors: Sequence[np.ndarray]) -> "MlpParams":
        return cls(list(layer_dims), list(tensors[0::2]), list(tensors[1::2]))

    def copy(self) -> "MlpParams":
        return MlpParams.from_tensors(self.layer_dims, [t.copy() for t in self.tensors()])

    def zeros_like(self) -> "MlpParams":
        return MlpParams.from_tensors(self.layer_dims, [np.zeros_like(t) for t in self.tensors()])

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())


def init_mlp(layer_dims: Sequence[int], rng: RngStream) -> MlpParams:
    """He initialization: W ~ N(0, 2/fan_in), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer_dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.gaussian((fan_out, fan_in), scale=math.sqrt(2.0 / fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases)


def identity_mlp(dim: int) -> MlpParams:
    return MlpParams([dim, dim], [np.eye(dim)], [np.zeros(dim)])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer


def forward(params: MlpParams, batch) -> tuple[np.ndarray, ForwardCache]:
    """ReLU on hidden layers, linear output layer."""
    a = as_matrix(batch)
    if a.shape[1] != params.layer_dims[0]:
        raise ValueError(f"input has {a.shape[1]} columns, network expects {params.layer_dims[0]}")
    cache = ForwardCache()
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if i < last else z
    return a, cache


def embed(params: MlpParams, batch) -> np.ndarray:
    return forward(params, batch)[0]


def backward(params: MlpParams, cache: ForwardCache, grad_output, return_input_grad=False):
    """Reverse-mode gradients of a scalar loss w.r.t. every weight and bias.

    ``grad_output`` is dLoss/d(embeddings).  Returns an ``MlpParams`` holding
    the gradients, plus dLoss/d(input) if ``return_input_grad`` is set.
    """
    g = as_matrix(grad_output)
    if g.shape != cache.pre[-1].shape:
        raise ValueError(f"grad_output has shape {g.shape}, expected {cache.pre[-1].shape}")
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for i in reversed(range(params.n_layers)):
        if i < params.n_layers - 1:
            g = g * (cache.pre[i] > 0.0)
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        if i > 0 or return_input_grad:
            g = g @ params.weights[i]
    grads = MlpParams(params.layer_dims, gw, gb)
    if return_input_grad:
        return grads, g
    return grads


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyper-parameters.

    ``total_steps`` is the horizon of the cosine schedule; trainers fill it
    in from epochs x batches-per-epoch.
    """

    base_lr: float = 0.03
    total_steps: int = 1
    weight_decay: float = 1e-4
    momentum: float = 0.9

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def cosine_lr(step: int, cfg: SgdConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             cfg: SgdConfig, velocity: list[np.ndarray] | None = None):
    """One momentum-SGD update with coupled weight decay.

    v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v.
    Works on flat tensor lists (see ``MlpParams.tensors``).  Returns the new
    parameter list and the new velocity list; inputs are not mutated.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergedError("diverged: non-finite gradient")
        d = g + cfg.weight_decay * p if cfg.weight_decay else g
        v = cfg.momentum * v + d if cfg.momentum else d
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def gradient_check(params: Sequence[np.ndarray],
                   loss_closure: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
                   step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_closure(tensors) -> (loss, grads)``.  The relative error of one
    entry is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = loss_closure(params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        ga = np.asarray(ga).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_closure(params)[0]
            flat[j] = orig - step
            down = loss_closure(params)[0]
            flat[j] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(ga[j] - fd) / max(1e-8, abs(ga[j]) + abs(fd))
            worst = max(worst, err)
    return worst


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: MlpParams, metadata: dict | None = None,
                    extra: Sequence[MlpParams] = ()) -> None:
    """Write the FSLM binary checkpoint.

    Layout: magic, u32 version, u32 layer count, u32 layer_dims, then each
    weight and bias block as little-endian float64, row-major; then a u32
    count of metadata lines, each a u32 byte length followed by a UTF-8
    ``key=value`` line.  ``extra`` networks (e.g. a classifier head) are
    stored after the first, each with its own layer count and dims.
    """
    blobs = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for net in (params, *extra):
        blobs.append(_pack_mlp(net))
    blobs.append(struct.pack("<I", 0xFFFFFFFF))
    lines = [f"{k}={v}" for k, v in (metadata or {}).items()]
    for line in lines:
        if "\n" in line:
            raise ValueError("metadata values must be single-line")
    blobs.append(struct.pack("<I", len(lines)))
    for line in lines:
        raw = line.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(blobs))


def _pack_mlp(net: MlpParams) -> bytes:
    out = [struct.pack("<I", net.n_layers), struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims)]
    for t in net.tensors():
        out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(path) -> tuple[list[MlpParams], dict]:
    """Read an FSLM checkpoint; returns ``([backbone, *extra], metadata)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    nets = []
    while True:
        (n_layers,) = struct.unpack("<I", take(4))
        if n_layers == 0xFFFFFFFF:
            break
        dims = list(struct.unpack(f"<{n_layers + 1}I", take(4 * (n_layers + 1))))
        tensors = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            tensors.append(np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8")
                           .reshape(fan_out, fan_in).astype(np.float64))
            tensors.append(np.frombuffer(take(8 * fan_out), dtype="<f8").astype(np.float64))
        nets.append(MlpParams.from_tensors(dims, tensors))
    if not nets:
        raise FormatError("checkpoint holds no network")
    (n_lines,) = struct.unpack("<I", take(4))
    meta = {}
    for _ in range(n_lines):
        (size,) = struct.unpack("<I", take(4))
        key, sep, value = take(size).decode("utf-8").partition("=")
        if not sep:
            raise FormatError(f"metadata line without '=': {key!r}")
        meta[key] = value
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint metadata")
    return nets, meta
