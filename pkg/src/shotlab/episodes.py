"""Episodic N-way m-shot evaluation of frozen features with logistic-regression probes."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .numeric import DivergedError, RngStream, as_matrix, l2_normalize_rows, log_softmax
from .protocol import DatasetTable

EPISODE_STREAM = 7
Z95 = 1.96


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 1
    queries: int = 15
    episodes: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("ways must be >= 2")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.queries < 0:
            raise ValueError("queries must be >= 0")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass(frozen=True)
class Episode:
    classes: np.ndarray  # the N original class ids; episode label i means classes[i]
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray


def sample_episode(table: DatasetTable, spec: EpisodeSpec, episode_index: int) -> Episode:
    """Draw episode ``episode_index`` from the novel split.

    The random stream depends only on ``(spec.seed, episode_index)``.
    """
    novel = table.indices("novel")
    labels = table.labels[novel]
    classes = np.unique(labels)
    if len(classes) < spec.ways:
        raise ValueError(f"need {spec.ways} novel classes, table has {len(classes)}")
    rng = RngStream(spec.seed, EPISODE_STREAM, episode_index)
    chosen = classes[rng.choose(len(classes), spec.ways)]
    per = spec.shots + spec.queries
    sup, qry = [], []
    for c in chosen:
        members = novel[labels == c]
        if len(members) < per:
            raise ValueError(f"novel class {c} has {len(members)} examples, episode needs {per}")
        pick = members[rng.choose(len(members), per)]
        sup.append(pick[:spec.shots])
        qry.append(pick[spec.shots:])
    local = np.arange(spec.ways)
    return Episode(
        classes=chosen,
        support=np.concatenate(sup),
        support_labels=np.repeat(local, spec.shots),
        query=np.concatenate(qry) if spec.queries else np.zeros(0, dtype=np.int64),
        query_labels=np.repeat(local, spec.queries),
    )


@dataclass(frozen=True)
class ProbeConfig:
    l2_lambda: float = 1e-3
    max_iters: int = 500
    step_size: float = 1.0
    grad_tolerance: float = 1e-6

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_size > 0 or not self.grad_tolerance > 0:
            raise ValueError("step_size and grad_tolerance must be positive")


@dataclass
class Probe:
    weights: np.ndarray  # (N, d)
    bias: np.ndarray  # (N,)
    losses: list[float] = field(default_factory=list)  # accepted objective values, first is the initial loss

    def logits(self, x) -> np.ndarray:
        return as_matrix(x) @ self.weights.T + self.bias

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def probe_objective(x, onehot, w, b, lam):
    """Mean multinomial cross-entropy + lam/2 |W|^2 for a stack of episodes.

    Shapes: x (E, S, d), onehot (E, S, N), w (E, N, d), b (E, N).
    Returns loss (E,), grad_w (E, N, d), grad_b (E, N).
    """
    s = x.shape[1]
    logits = x @ w.transpose(0, 2, 1)
    logits += b[:, None, :]
    logp = log_softmax(logits, axis=2)
    loss = -np.einsum("esn,esn->e", onehot, logp) / s + 0.5 * lam * np.einsum("end,end->e", w, w)
    err = np.exp(logp)
    err -= onehot
    err /= s
    grad_w = err.transpose(0, 2, 1) @ x + lam * w
    grad_b = err.sum(axis=1)
    return loss, grad_w, grad_b


def fit_probes(x, y, n_classes: int, cfg: ProbeConfig):
    """Fit one probe per episode on a stack of support sets.

    Full-batch gradient descent from zero.  A step that would raise the
    objective is rejected and that episode's step size is halved, so each
    recorded loss sequence is non-increasing.  Every episode is updated only
    through its own slice, so results do not depend on what else is stacked
    alongside it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 3 or y.shape != x.shape[:2]:
        raise ValueError("expected x of shape (E, S, d) and y of shape (E, S)")
    e, _, d = x.shape
    for row in y:
        if len(np.unique(row)) != n_classes or row.min() < 0 or row.max() >= n_classes:
            raise ValueError("every class must be present in each support set")
    onehot = np.zeros(y.shape + (n_classes,))
    np.put_along_axis(onehot, y[..., None], 1.0, axis=2)

    w = np.zeros((e, n_classes, d))
    b = np.zeros((e, n_classes))
    loss, gw, gb = probe_objective(x, onehot, w, b, cfg.l2_lambda)
    if not np.all(np.isfinite(loss)):
        raise DivergedError("diverged: non-finite probe loss")
    initial = loss.copy()
    rec_loss, rec_accept = [], []
    step = np.full(e, cfg.step_size)
    active = np.ones(e, dtype=bool)
    for _ in range(cfg.max_iters):
        gnorm = np.maximum(np.abs(gw).max(axis=(1, 2)), np.abs(gb).max(axis=1))
        active &= (gnorm > cfg.grad_tolerance) & (step > 1e-12)
        if not active.any():
            break
        w_new = w - step[:, None, None] * gw
        b_new = b - step[:, None] * gb
        loss_new, gw_new, gb_new = probe_objective(x, onehot, w_new, b_new, cfg.l2_lambda)
        if not np.all(np.isfinite(loss_new[active])):
            raise DivergedError("diverged: non-finite probe loss")
        accept = active & (loss_new <= loss)
        reject = active & ~accept
        m3, m2 = accept[:, None, None], accept[:, None]
        np.copyto(w, w_new, where=m3)
        np.copyto(gw, gw_new, where=m3)
        np.copyto(b, b_new, where=m2)
        np.copyto(gb, gb_new, where=m2)
        np.copyto(loss, loss_new, where=accept)
        step[reject] *= 0.5
        rec_loss.append(loss.copy())
        rec_accept.append(accept)
    probes = []
    rec_loss = np.array(rec_loss).reshape(-1, e)
    rec_accept = np.array(rec_accept, dtype=bool).reshape(-1, e)
    for i in range(e):
        hist = [float(initial[i])] + rec_loss[rec_accept[:, i], i].tolist()
        probes.append(Probe(w[i], b[i], hist))
    return probes


def fit_probe(support, labels, cfg: ProbeConfig, n_classes: int | None = None) -> Probe:
    support = as_matrix(support)
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return fit_probes(support[None], labels[None], n_classes, cfg)[0]


def predict_and_score(probe: Probe, query, query_labels) -> float:
    """Fraction of queries whose argmax logit (ties -> lowest index) is correct."""
    query_labels = np.asarray(query_labels)
    if len(query_labels) == 0:
        raise ValueError("empty query set")
    query = as_matrix(query)
    if query.shape[1] != probe.weights.shape[1]:
        raise ValueError("query dimension does not match probe")
    return float(np.mean(probe.predict(query) == query_labels))


def fuse_features(u, v) -> np.ndarray:
    """Normalize each block, concatenate, normalize again."""
    u, v = as_matrix(u), as_matrix(v)
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"row-count mismatch: {u.shape[0]} vs {v.shape[0]}")
    return l2_normalize_rows(np.hstack([l2_normalize_rows(u), l2_normalize_rows(v)]))


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width 1.96 * s / sqrt(n), s with n-1."""
    a = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(a))
    if len(a) < 2:
        return mean, 0.0
    return mean, float(Z95 * np.std(a, ddof=1) / math.sqrt(len(a)))


def fingerprint(features) -> str:
    m = np.ascontiguousarray(as_matrix(features), dtype="<f8")
    return hashlib.sha256(m.tobytes() + str(m.shape).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    ways: int
    shots: int
    queries: int
    episodes: int
    seed: int
    mean_acc: float
    ci95: float
    per_episode_acc: list[float]
    feature_file: str
    probe_config: dict
    normalize: bool = True
    fingerprint: str = ""

    def summary(self) -> str:
        return format_acc(self.mean_acc, self.ci95)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def format_acc(mean: float, ci: float) -> str:
    return f"{100 * mean:.2f}±{100 * ci:.2f}"


def _sample(table, spec, index):
    try:
        return sample_episode(table, spec, index)
    except ValueError as exc:
        raise ValueError(f"episode {index}: {exc}") from exc


def _run_chunk(features, table, spec, cfg, indices):
    eps = [_sample(table, spec, int(i)) for i in indices]
    x = np.stack([features[ep.support] for ep in eps])
    y = np.stack([ep.support_labels for ep in eps])
    probes = fit_probes(x, y, spec.ways, cfg)
    return [predict_and_score(p, features[ep.query], ep.query_labels) for p, ep in zip(probes, eps)]


def evaluate(features, table: DatasetTable, spec: EpisodeSpec, cfg: ProbeConfig = ProbeConfig(),
             normalize: bool = True, feature_file: str = "", episode_indices=None,
             chunk_size: int = 250, workers: int = 1) -> EvalReport:
    """Run ``spec.episodes`` episodes and aggregate accuracy with a 95% CI.

    Episodes are independent: episode ``e`` is sampled from its own stream and
    fitted in isolation, so chunking, ordering and ``workers`` never change
    the report.  ``episode_indices`` restricts the run to a subset; the
    report always lists episodes in increasing index order.
    """
    features = as_matrix(features)
    if features.shape[0] != len(table):
        raise ValueError(f"{features.shape[0]} feature rows for {len(table)} table rows")
    if normalize:
        features = l2_normalize_rows(features)
    if episode_indices is None:
        episode_indices = range(spec.episodes)
    ids = np.unique(np.asarray(list(episode_indices), dtype=np.int64))
    chunks = [ids[i:i + chunk_size] for i in range(0, len(ids), chunk_size)]

    def run(chunk):
        try:
            return _run_chunk(features, table, spec, cfg, chunk)
        except DivergedError as exc:
            raise DivergedError(f"episodes {chunk[0]}..{chunk[-1]}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    accs = [a for r in results for a in r]
    mean, ci = mean_ci95(accs)
    return EvalReport(spec.ways, spec.shots, spec.queries, len(accs), spec.seed, mean, ci, accs,
                      feature_file, asdict(cfg), normalize, fingerprint(features))
