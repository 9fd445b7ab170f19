"""Train-per-setting and feature extraction shared by the CLI and the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .contrastive import TraceRow, train_ssl
from .encoder import FormatError, MlpParams, load_checkpoint, save_checkpoint
from .numeric import RngStream
from .protocol import DatasetTable, Setting, SettingSpec, build_setting
from .supervised import SupModel, extract_logit_features, extract_ssl_features, train_supervised

BUDGET_STREAM = 5


class TfslNotShipped(ValueError):
    pass


TFSL_MESSAGE = (
    "no TFSL algorithm ships with shotlab: the tfsl setting exists for building "
    "training views only. Pass --tfsl-recipe to train a supervised model on the "
    "labeled base portion plus an SSL model on the unlabeled novel portion."
)


@dataclass
class TrainedModel:
    kind: str  # "ssl" or "sup"
    nets: list[MlpParams]
    trace: list[TraceRow]
    metadata: dict

    def save(self, path) -> None:
        save_checkpoint(path, self.nets[0], self.metadata, extra=self.nets[1:])


def _sup(table, rows, labels, cfg, setting):
    res = train_supervised(table.features[rows], labels, cfg.sup(table.features.shape[1]))
    meta = {"kind": "sup", "setting": setting, "seed": cfg["seed"],
            "classes": ",".join(str(c) for c in res.model.classes.tolist()), "config": cfg.one_line()}
    return TrainedModel("sup", [res.model.backbone, res.model.head], [TraceRow(*r) for r in res.trace], meta)


def _ssl(x, cfg, setting):
    res = train_ssl(x, cfg.ssl(x.shape[1]))
    meta = {"kind": "ssl", "setting": setting, "seed": cfg["seed"], "config": cfg.one_line()}
    return TrainedModel("ssl", [res.params], res.trace, meta)


def train_setting(table: DatasetTable, setting: Setting, cfg: RunConfig,
                  tfsl_recipe: bool = False) -> list[TrainedModel]:
    """Train the model(s) a setting calls for.

    FSL gives one supervised model.  The UBC settings give one SSL model and
    only ever see ``view.features``.  TFSL raises unless ``tfsl_recipe`` is
    set, in which case it returns ``[supervised, ssl]``.
    """
    rng = RngStream(cfg["seed"], BUDGET_STREAM)
    if setting is Setting.FSL:
        view = build_setting(table, SettingSpec(setting))
        return [_sup(table, view.labeled_indices, view.labels(table), cfg, setting.value)]
    if setting is Setting.UBC_FSL:
        view = build_setting(table, SettingSpec(setting))
        return [_ssl(view.features(table), cfg, setting.value)]
    if setting is Setting.UBC_TFSL:
        view = build_setting(table, SettingSpec(setting, cfg.budget("setting.ubc_tfsl_budget")), rng)
        return [_ssl(view.features(table), cfg, setting.value)]
    if not tfsl_recipe:
        raise TfslNotShipped(TFSL_MESSAGE)
    view = build_setting(table, SettingSpec(setting, cfg.budget("setting.tfsl_budget")), rng)
    unlabeled = np.setdiff1d(view.indices, view.labeled_indices)
    return [_sup(table, view.labeled_indices, view.labels(table), cfg, setting.value),
            _ssl(table.features[unlabeled], cfg, setting.value)]


def model_features(nets: list[MlpParams], meta: dict, data, penultimate: bool = False) -> np.ndarray:
    kind = meta.get("kind")
    if kind == "ssl":
        return extract_ssl_features(nets[0], data)
    if kind == "sup":
        if len(nets) != 2:
            raise FormatError("supervised checkpoint must hold a backbone and a head")
        classes = np.array([int(c) for c in meta.get("classes", "").split(",") if c], dtype=np.int64)
        if len(classes) != nets[1].layer_dims[-1]:
            classes = np.arange(nets[1].layer_dims[-1])
        return extract_logit_features(SupModel(nets[0], nets[1], classes), data, penultimate)
    raise FormatError(f"checkpoint kind must be 'ssl' or 'sup', got {kind!r}")


def checkpoint_features(path, data, penultimate: bool = False) -> np.ndarray:
    nets, meta = load_checkpoint(path)
    return model_features(nets, meta, data, penultimate)
