"""Supervised baseline: cross-entropy training on labeled base classes and
feature extraction from the trained networks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import MlpParams, SgdConfig, backward, cosine_lr, forward, init_mlp, sgd_step
from .numeric import DivergedError, RngStream, as_matrix, log_softmax

_INIT_STREAM = 1
_SHUFFLE_STREAM = 2
_HEAD_STREAM = 4


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class, and d(loss)/d(logits)."""
    logits = as_matrix(logits)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(b)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / b


@dataclass
class SupModel:
    """Backbone MLP plus a linear classification head (a one-layer MLP)."""

    backbone: MlpParams
    head: MlpParams
    classes: np.ndarray  # original label id of each head row

    def __post_init__(self):
        if self.head.n_layers != 1 or self.head.layer_dims[0] != self.backbone.layer_dims[-1]:
            raise ValueError("head input dim must equal backbone output dim")
        if len(self.classes) != self.head.layer_dims[-1]:
            raise ValueError("one class id per head output is required")

    def tensors(self):
        return self.backbone.tensors() + self.head.tensors()

    def with_tensors(self, tensors) -> "SupModel":
        nb = 2 * self.backbone.n_layers
        return SupModel(MlpParams.from_tensors(self.backbone.layer_dims, tensors[:nb]),
                        MlpParams.from_tensors(self.head.layer_dims, tensors[nb:]),
                        self.classes)


def sup_loss_and_grads(model: SupModel, x, y):
    """Cross-entropy through head and backbone; grads follow ``model.tensors()``."""
    h, cache_b = forward(model.backbone, x)
    logits, cache_h = forward(model.head, h)
    loss, g = cross_entropy(logits, y)
    gh, g_in = backward(model.head, cache_h, g, return_input_grad=True)
    gb = backward(model.backbone, cache_b, g_in)
    return loss, gb.tensors() + gh.tensors()


@dataclass(frozen=True)
class SupConfig:
    layer_dims: tuple[int, ...] = (64, 128, 128, 128)
    batch_size: int = 128
    epochs: int = 20
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0


@dataclass
class SupResult:
    model: SupModel
    trace: list[tuple[int, int, float, float]]  # step, epoch, lr, loss


def train_supervised(data, labels, cfg: SupConfig) -> SupResult:
    x = as_matrix(data)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ValueError("one label per example is required")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("degenerate supervision: fewer than two classes")
    if cfg.layer_dims[0] != x.shape[1]:
        raise ValueError(f"data has {x.shape[1]} columns, encoder expects {cfg.layer_dims[0]}")

    root = RngStream(cfg.seed)
    backbone = init_mlp(cfg.layer_dims, root.child(_INIT_STREAM))
    head = init_mlp([cfg.layer_dims[-1], len(classes)], root.child(_HEAD_STREAM))
    model = SupModel(backbone, head, classes)

    bs = min(cfg.batch_size, x.shape[0])
    per_epoch = x.shape[0] // bs
    sgd = replace(cfg.sgd, total_steps=max(1, cfg.epochs * per_epoch))
    tensors = model.tensors()
    velocity = None
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = root.child(_SHUFFLE_STREAM, epoch).permutation(x.shape[0])
        for bi in range(per_epoch):
            idx = order[bi * bs:(bi + 1) * bs]
            loss, grads = sup_loss_and_grads(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise DivergedError(f"diverged: non-finite loss at step {step}")
            lr = cosine_lr(step, sgd)
            tensors, velocity = sgd_step(tensors, grads, lr, sgd, velocity)
            model = model.with_tensors(tensors)
            trace.append((step, epoch, lr, loss))
            step += 1
    return SupResult(model, trace)


def predict_classes(model: SupModel, data) -> np.ndarray:
    logits = extract_logit_features(model, data)
    return model.classes[np.argmax(logits, axis=1)]


def extract_logit_features(model: SupModel, data, penultimate=False) -> np.ndarray:
    """Pre-softmax logits of the classifier, used as the feature embedding.

    With ``penultimate=True`` the backbone output (before the head) is
    returned instead.
    """
    h = forward(model.backbone, data)[0]
    if penultimate:
        return h
    return forward(model.head, h)[0]


def extract_ssl_features(params: MlpParams, data) -> np.ndarray:
    return forward(params, data)[0]
