"""Momentum-contrast self-supervised training on unlabeled feature vectors.

Each example is augmented twice; the query view goes through the trained
encoder, the key view through a slowly moving (EMA) copy of it, and the
InfoNCE loss separates the positive key from a FIFO queue of past keys.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import MlpParams, SgdConfig, backward, cosine_lr, forward, init_mlp, sgd_step
from .numeric import (
    DivergedError,
    RngStream,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    log_sum_exp,
)

NORM_TOL = 1e-6

# stream ids under the trainer seed
_INIT_STREAM = 1
_SHUFFLE_STREAM = 2
_AUGMENT_STREAM = 3


@dataclass(frozen=True)
class AugmentPolicy:
    """Vector-space stand-in for image augmentations.

    ``gaussian_sigma`` is relative to the per-coordinate standard deviation of
    the training data (the trainer passes that as ``noise_scale``).
    """

    gaussian_sigma: float = 0.1
    mask_fraction: float = 0.2
    scale_jitter: float = 0.1

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.scale_jitter < 0:
            raise ValueError("gaussian_sigma and scale_jitter must be non-negative")
        if not 0 <= self.mask_fraction < 1:
            raise ValueError("mask_fraction must be in [0, 1)")
        if not (self.gaussian_sigma > 0 or self.mask_fraction > 0 or self.scale_jitter > 0):
            raise ValueError("degenerate augmentation policy: both views would be identical")


def apply_view(x, noise, mask, u, policy: AugmentPolicy, noise_scale=1.0) -> np.ndarray:
    """Deterministic part of one augmentation given its random draws.

    ``noise`` is standard normal (same shape as ``x``), ``mask`` is boolean
    with True marking coordinates to zero, ``u`` holds one Uniform(-1, 1)
    draw per row.
    """
    x = np.asarray(x, dtype=np.float64)
    view = x + policy.gaussian_sigma * noise_scale * noise
    view = np.where(mask, 0.0, view)
    return view * (1.0 + policy.scale_jitter * np.asarray(u))[..., None]


def _draw_view(x: np.ndarray, policy: AugmentPolicy, rng: RngStream, noise_scale):
    n, d = x.shape
    noise = rng.gaussian((n, d))
    n_mask = int(math.floor(policy.mask_fraction * d))
    mask = np.zeros((n, d), dtype=bool)
    if n_mask:
        order = np.argsort(rng.uniform(size=(n, d)), axis=1)[:, :n_mask]
        np.put_along_axis(mask, order, True, axis=1)
    u = rng.uniform(-1.0, 1.0, size=n)
    return apply_view(x, noise, mask, u, policy, noise_scale)


def augment_batch(x, policy: AugmentPolicy, rng: RngStream, noise_scale=1.0):
    """Two independent views of every row of ``x``.

    The query views are drawn from ``rng.child(0)`` and the key views from
    ``rng.child(1)``, so the two never share random draws.
    """
    x = as_matrix(x)
    return (_draw_view(x, policy, rng.child(0), noise_scale),
            _draw_view(x, policy, rng.child(1), noise_scale))


def augment_pair(x, policy: AugmentPolicy, rng: RngStream, noise_scale=1.0):
    xq, xk = augment_batch(np.asarray(x, dtype=np.float64)[None, :], policy, rng, noise_scale)
    return xq[0], xk[0]


def _check_unit_rows(m, what):
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"embeddings must be normalized ({what})")


def info_nce(q, k_pos, queue, tau: float):
    """InfoNCE loss against a queue of negatives, and its gradient w.r.t. q.

    loss = mean_i -log( exp(q_i.k_i/tau) / (exp(q_i.k_i/tau) + sum_j exp(q_i.n_j/tau)) )

    Keys and queue are constants: no gradient is returned for them.
    """
    q, k_pos, queue = as_matrix(q), as_matrix(k_pos), as_matrix(queue)
    if q.shape != k_pos.shape:
        raise ValueError(f"q {q.shape} and k_pos {k_pos.shape} differ in shape")
    if queue.shape[0] < 1:
        raise ValueError("queue has no valid rows")
    if queue.shape[1] != q.shape[1]:
        raise ValueError("queue dimension differs from embedding dimension")
    if not tau > 0:
        raise ValueError("tau must be positive")
    _check_unit_rows(q, "queries")
    _check_unit_rows(k_pos, "positive keys")

    b = q.shape[0]
    pos = np.einsum("ij,ij->i", q, k_pos)[:, None] / tau
    neg = (q @ queue.T) / tau
    logits = np.concatenate([pos, neg], axis=1)
    lse = log_sum_exp(logits, axis=1)
    # -log softmax_pos = log(1 + sum_j exp(neg_j - pos)); log1p keeps the
    # value strictly positive when the positive dominates
    rel = neg - pos
    top = np.maximum(rel.max(axis=1), 0.0)
    tail = np.exp(rel - top[:, None]).sum(axis=1)
    per_row = np.where(top > 0.0, top + np.log(np.exp(-top) + tail), np.log1p(tail))
    loss = float(np.mean(per_row))

    p = np.exp(logits - lse[:, None])
    # d/dq_i = (sum_c p_ic * key_c - key_pos) / (tau * b)
    grad_q = (p[:, :1] * k_pos + p[:, 1:] @ queue - k_pos) / (tau * b)
    return loss, grad_q


def info_nce_direct(q, k_pos, queue, tau: float) -> float:
    """Literal exp/softmax evaluation of InfoNCE; an oracle for tests."""
    q, k_pos, queue = as_matrix(q), as_matrix(k_pos), as_matrix(queue)
    total = 0.0
    for i in range(q.shape[0]):
        num = math.exp(float(q[i] @ k_pos[i]) / tau)
        den = num + sum(math.exp(float(q[i] @ n) / tau) for n in queue)
        total += -math.log(num / den)
    return total / q.shape[0]


def ema_update(theta_k: MlpParams, theta_q: MlpParams, ema_momentum: float) -> MlpParams:
    """theta_k <- m * theta_k + (1 - m) * theta_q, parameter by parameter."""
    if not 0.0 <= ema_momentum <= 1.0:
        raise ValueError("ema_momentum must be in [0, 1]")
    if theta_k.layer_dims != theta_q.layer_dims:
        raise ValueError("key and query encoders differ in shape")
    if ema_momentum == 1.0:
        return theta_k.copy()
    if ema_momentum == 0.0:
        return theta_q.copy()
    out = [ema_momentum * k + (1.0 - ema_momentum) * q
           for k, q in zip(theta_k.tensors(), theta_q.tensors())]
    return MlpParams.from_tensors(theta_k.layer_dims, out)


@dataclass
class MocoState:
    theta_q: MlpParams
    theta_k: MlpParams
    queue: np.ndarray
    cursor: int = 0
    filled: int = 0
    tau: float = 0.07
    ema_momentum: float = 0.5

    @classmethod
    def create(cls, theta_q: MlpParams, queue_size: int, tau=0.07, ema_momentum=0.5):
        if queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        d = theta_q.layer_dims[-1]
        return cls(theta_q, theta_q.copy(), np.zeros((queue_size, d)), 0, 0, tau, ema_momentum)

    @property
    def negatives(self) -> np.ndarray:
        return self.queue[:self.filled]


def enqueue(state: MocoState, keys) -> MocoState:
    """Write ``keys`` into the FIFO at the cursor, overwriting the oldest rows."""
    keys = as_matrix(keys)
    size = state.queue.shape[0]
    b = keys.shape[0]
    if b > size:
        raise ValueError("batch exceeds queue")
    _check_unit_rows(keys, "keys")
    queue = state.queue.copy()
    rows = (state.cursor + np.arange(b)) % size
    queue[rows] = keys
    return replace(state, queue=queue, cursor=(state.cursor + b) % size,
                   filled=min(state.filled + b, size))


@dataclass(frozen=True)
class SslConfig:
    layer_dims: tuple[int, ...] = (64, 128, 128, 128)
    batch_size: int = 128
    queue_size: int = 256
    tau: float = 0.07
    ema_momentum: float = 0.5
    epochs: int = 30
    sgd: SgdConfig = field(default_factory=SgdConfig)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must be in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class SslResult:
    params: MlpParams
    trace: list[TraceRow]
    state: MocoState


def moco_loss_and_grads(state: MocoState, xq, xk, step: int = 0):
    """InfoNCE for one batch of paired views.

    Returns ``(loss, grads, keys)``: the gradients are for the query encoder
    only, the normalized keys come from the key encoder with no gradient.
    With an empty queue there is nothing to contrast against and
    ``(None, None, keys)`` is returned.
    """
    k = l2_normalize_rows(forward(state.theta_k, xk)[0])
    if not np.all(np.isfinite(k)):
        raise DivergedError(f"diverged: non-finite key embeddings at step {step}")
    if state.filled == 0:
        return None, None, k
    raw_q, cache = forward(state.theta_q, xq)
    if not np.all(np.isfinite(raw_q)):
        raise DivergedError(f"diverged: non-finite query embeddings at step {step}")
    loss, grad_q = info_nce(l2_normalize_rows(raw_q), k, state.negatives, state.tau)
    if not math.isfinite(loss):
        raise DivergedError(f"diverged: non-finite loss at step {step}")
    grads = backward(state.theta_q, cache, l2_normalize_rows_backward(raw_q, grad_q))
    return loss, grads, k


def train_ssl(data, cfg: SslConfig) -> SslResult:
    """Train a query encoder by momentum contrast on unlabeled rows of ``data``.

    Only feature values are read; there is no label argument.  The last
    incomplete batch of each epoch is dropped.  While the queue is still
    empty (the very first batch) there are no negatives, so that batch only
    seeds the queue.
    """
    x = as_matrix(data)
    if x.shape[0] < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {x.shape[0]}")
    if cfg.layer_dims[0] != x.shape[1]:
        raise ValueError(f"data has {x.shape[1]} columns, encoder expects {cfg.layer_dims[0]}")
    if cfg.batch_size > cfg.queue_size:
        raise ValueError("batch exceeds queue")

    root = RngStream(cfg.seed)
    theta_q = init_mlp(cfg.layer_dims, root.child(_INIT_STREAM))
    state = MocoState.create(theta_q, cfg.queue_size, cfg.tau, cfg.ema_momentum)
    trace: list[TraceRow] = []
    per_epoch = x.shape[0] // cfg.batch_size
    total = max(1, cfg.epochs * per_epoch)
    sgd = replace(cfg.sgd, total_steps=total)
    noise_scale = x.std(axis=0)
    tensors = theta_q.tensors()
    velocity = None

    step = 0
    for epoch in range(cfg.epochs):
        order = root.child(_SHUFFLE_STREAM, epoch).permutation(x.shape[0])
        for bi in range(per_epoch):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            xq, xk = augment_batch(x[idx], cfg.policy, root.child(_AUGMENT_STREAM, step), noise_scale)
            lr = cosine_lr(step, sgd)
            loss, grads, k = moco_loss_and_grads(state, xq, xk, step)
            if grads is not None:
                tensors, velocity = sgd_step(tensors, grads.tensors(), lr, sgd, velocity)
                state.theta_q = MlpParams.from_tensors(cfg.layer_dims, tensors)
                trace.append(TraceRow(step, epoch, lr, loss))
            state.theta_k = ema_update(state.theta_k, state.theta_q, state.ema_momentum)
            state = enqueue(state, k)
            step += 1
    return SslResult(state.theta_q, trace, state)


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for row in trace:
            w.writerow([row.step, row.epoch, repr(row.lr), repr(row.loss)])
