"""Datasets, the four training settings, the synthetic generator and file I/O.

Settings (base and novel classes are disjoint):

    FSL       labeled base examples
    TFSL      labeled base + unlabeled novel examples
    UBC_FSL   unlabeled base examples
    UBC_TFSL  unlabeled base + unlabeled novel examples
"""

from __future__ import annotations

import csv
import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import FormatError
from .numeric import RngStream, as_matrix

SPLITS = ("base", "val", "novel")
FEATURE_MAGIC = b"FSLF"
FEATURE_VERSION = 1


@dataclass(frozen=True, eq=False)
class DatasetTable:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        features = as_matrix(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        split = np.asarray(self.split, dtype=object)
        n = features.shape[0]
        if labels.shape != (n,) or split.shape != (n,):
            raise ValueError("features, labels and split must have one row per example")
        bad = set(split) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tag {sorted(bad)[0]!r}")
        owner = {}
        for lab, tag in zip(labels.tolist(), split.tolist()):
            if owner.setdefault(lab, tag) != tag:
                raise ValueError(f"class {lab} appears under splits {owner[lab]!r} and {tag!r}")
        features.setflags(write=False)
        labels.setflags(write=False)
        split.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)

    def __len__(self):
        return self.features.shape[0]

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    def classes(self, tag: str | None = None) -> np.ndarray:
        labels = self.labels if tag is None else self.labels[self.split == tag]
        return np.unique(labels)

    def take(self, idx) -> "DatasetTable":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetTable(self.features[idx], self.labels[idx], self.split[idx], self.class_names)

    def equals(self, other: "DatasetTable") -> bool:
        return (self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and np.array_equal(self.labels, other.labels)
                and list(self.split) == list(other.split))


class Setting(enum.Enum):
    FSL = "fsl"
    TFSL = "tfsl"
    UBC_FSL = "ubc-fsl"
    UBC_TFSL = "ubc-tfsl"

    @property
    def labeled(self) -> bool:
        return self in (Setting.FSL, Setting.TFSL)

    @property
    def transductive(self) -> bool:
        return self in (Setting.TFSL, Setting.UBC_TFSL)


@dataclass(frozen=True)
class SettingSpec:
    kind: Setting
    novel_unlabeled_budget: int | str = 100  # per novel class, or "all"

    def __post_init__(self):
        b = self.novel_unlabeled_budget
        if b != "all" and not (isinstance(b, (int, np.integer)) and b >= 0):
            raise ValueError(f"novel_unlabeled_budget must be a count or 'all', got {b!r}")


@dataclass(frozen=True)
class TrainingView:
    """Indices into a table.  ``labeled`` is False for the UBC settings.

    For TFSL the novel part is unlabeled even though base labels are kept:
    ``labeled_indices`` lists the rows whose labels may be used.
    """

    indices: np.ndarray
    labeled: bool
    labeled_indices: np.ndarray

    def features(self, table: DatasetTable) -> np.ndarray:
        return table.features[self.indices]

    def labels(self, table: DatasetTable) -> np.ndarray:
        if not self.labeled:
            raise ValueError("this training view carries no labels")
        return table.labels[self.labeled_indices]


def build_setting(table: DatasetTable, spec: SettingSpec, rng: RngStream | None = None) -> TrainingView:
    base = table.indices("base")
    novel_part = np.zeros(0, dtype=np.int64)
    if spec.kind.transductive:
        budget = spec.novel_unlabeled_budget
        picks = []
        for ci, c in enumerate(table.classes("novel")):
            members = np.flatnonzero((table.labels == c) & (table.split == "novel"))
            if budget == "all":
                picks.append(members)
                continue
            if budget > len(members):
                raise ValueError(f"novel class {c} has {len(members)} examples, budget is {budget}")
            stream = rng if rng is not None else RngStream(0)
            picks.append(np.sort(members[stream.child(ci).choose(len(members), budget)]))
        if picks:
            novel_part = np.sort(np.concatenate(picks))  # row order must not depend on labels
    indices = np.concatenate([base, novel_part]).astype(np.int64)
    labeled = spec.kind.labeled
    return TrainingView(indices, labeled, base if labeled else np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class SynthConfig:
    base_classes: int = 64
    val_classes: int = 16
    novel_classes: int = 20
    per_class: int = 50
    ambient_dim: int = 64
    base_subspace_dim: int = 24
    novel_subspace_dim: int = 24
    mean_spread: float = 0.5
    cluster_sigma: float = 0.5
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.base_subspace_dim + self.novel_subspace_dim > self.ambient_dim:
            raise ValueError("base_subspace_dim + novel_subspace_dim exceeds ambient_dim")
        if self.per_class < 2:
            raise ValueError("per_class must be >= 2")
        if self.base_classes < 1 or min(self.novel_classes, self.val_classes) < 0:
            raise ValueError("need at least one base class and non-negative val/novel counts")
        if min(self.base_subspace_dim, self.novel_subspace_dim) < 1:
            raise ValueError("subspace dims must be positive")
        if min(self.mean_spread, self.cluster_sigma, self.noise_sigma) < 0:
            raise ValueError("spread and noise scales must be non-negative")


def synth_generate(cfg: SynthConfig) -> DatasetTable:
    """Gaussian clusters with a controlled base -> novel shift.

    Base and val class means live on the first ``base_subspace_dim``
    coordinates, novel means on the next ``novel_subspace_dim``.  Each example
    is its class mean plus ``cluster_sigma`` noise inside the class's
    subspace plus ``noise_sigma`` isotropic noise on every coordinate.
    Class ids run base, then val, then novel.
    """
    rng = RngStream(cfg.seed)
    d = cfg.ambient_dim
    base_sl = slice(0, cfg.base_subspace_dim)
    novel_sl = slice(cfg.base_subspace_dim, cfg.base_subspace_dim + cfg.novel_subspace_dim)
    groups = [("base", cfg.base_classes, base_sl), ("val", cfg.val_classes, base_sl),
              ("novel", cfg.novel_classes, novel_sl)]
    feats, labels, split = [], [], []
    cid = 0
    for tag, count, sl in groups:
        width = sl.stop - sl.start
        for _ in range(count):
            stream = rng.child(cid)
            mean = np.zeros(d)
            mean[sl] = cfg.mean_spread * stream.gaussian(width)
            x = np.tile(mean, (cfg.per_class, 1))
            x[:, sl] += cfg.cluster_sigma * stream.gaussian((cfg.per_class, width))
            x += cfg.noise_sigma * stream.gaussian((cfg.per_class, d))
            feats.append(x)
            labels += [cid] * cfg.per_class
            split += [tag] * cfg.per_class
            cid += 1
    return DatasetTable(np.vstack(feats), np.array(labels), np.array(split, dtype=object))


def subsample(table: DatasetTable, fraction: float, rng: RngStream) -> DatasetTable:
    """Keep floor(fraction * n_c) examples of every class c, original order kept."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    keep = []
    for ci, c in enumerate(table.classes()):
        members = np.flatnonzero(table.labels == c)
        k = math.floor(fraction * len(members))
        if k < 1:
            raise ValueError(f"fraction {fraction} keeps no example of class {c}")
        keep.append(members[rng.child(ci).choose(len(members), k)])
    return table.take(np.sort(np.concatenate(keep)))


# -- files ------------------------------------------------------------------

def save_features(path, features) -> None:
    """FSLF: magic, u32 version, u32 n, u32 d, n*d little-endian float64."""
    m = as_matrix(features)
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, *m.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError("feature header short")
    if data[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature magic")
    version, n, d = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}")
    payload = data[16:]
    if len(payload) < 8 * n * d:
        raise FormatError("feature payload short")
    if len(payload) > 8 * n * d:
        raise FormatError("feature payload has trailing bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(n, d).astype(np.float64)


def save_meta(path, table: DatasetTable) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "split"])
    for i, (lab, tag) in enumerate(zip(table.labels.tolist(), table.split.tolist())):
        w.writerow([i, lab, tag])
    Path(path).write_text(buf.getvalue())


def load_meta(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "label", "split"]:
        raise FormatError("metadata header must be 'id,label,split'")
    labels, split = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"metadata line {lineno}: expected 3 fields")
        try:
            if int(row[0]) != lineno - 2:
                raise FormatError(f"metadata line {lineno}: ids must run 0..n-1 in order")
            labels.append(int(row[1]))
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"metadata line {lineno}: non-integer id or label") from None
        if row[2] not in SPLITS:
            raise FormatError(f"unknown split tag {row[2]!r} on metadata line {lineno}")
        split.append(row[2])
    return np.array(labels, dtype=np.int64), np.array(split, dtype=object)


def dataset_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ".meta.csv"), prefix.with_name(prefix.name + ".fslf")


def save_dataset(table: DatasetTable, meta_path, feature_path) -> None:
    save_meta(meta_path, table)
    save_features(feature_path, table.features)


def load_dataset(meta_path, feature_path) -> DatasetTable:
    labels, split = load_meta(meta_path)
    feats = load_features(feature_path)
    if feats.shape[0] != len(labels):
        raise FormatError(f"row-count mismatch: {len(labels)} metadata rows, {feats.shape[0]} feature rows")
    return DatasetTable(feats, labels, split)
