"""Flat ``key=value`` run configuration.

Every trainer and evaluation default is addressable by a dotted key.  Files
hold one ``key=value`` per line (``#`` starts a comment); command-line
overrides win over file values; unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path

from .contrastive import AugmentPolicy, SslConfig
from .encoder import SgdConfig
from .episodes import EpisodeSpec, ProbeConfig
from .protocol import SynthConfig
from .supervised import SupConfig


class ConfigError(ValueError):
    """Unknown key or unparseable value in a run configuration."""


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "synth.base_classes": 64,
    "synth.val_classes": 16,
    "synth.novel_classes": 20,
    "synth.per_class": 50,
    "synth.ambient_dim": 64,
    "synth.base_subspace_dim": 24,
    "synth.novel_subspace_dim": 24,
    "synth.mean_spread": 0.5,
    "synth.cluster_sigma": 0.5,
    "synth.noise_sigma": 0.5,
    "model.hidden": (128, 128),
    "model.emb_dim": 128,
    "setting.tfsl_budget": "100",
    "setting.ubc_tfsl_budget": "all",
    "ssl.epochs": 30,
    "ssl.batch_size": 128,
    "ssl.queue_size": 256,
    "ssl.tau": 0.07,
    "ssl.ema_momentum": 0.5,
    "ssl.lr": 0.03,
    "ssl.weight_decay": 1e-4,
    "ssl.momentum": 0.9,
    "aug.gaussian_sigma": 0.1,
    "aug.mask_fraction": 0.2,
    "aug.scale_jitter": 0.1,
    "sup.epochs": 20,
    "sup.batch_size": 128,
    "sup.lr": 0.03,
    "sup.weight_decay": 1e-4,
    "sup.momentum": 0.9,
    "probe.l2_lambda": 1e-3,
    "probe.max_iters": 500,
    "probe.step_size": 1.0,
    "probe.grad_tolerance": 1e-6,
    "eval.ways": 5,
    "eval.shots": 1,
    "eval.queries": 15,
    "eval.episodes": 1000,
    "eval.normalize": True,
}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            text = Path(path).read_text()
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                cfg.set(key.strip(), value)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        return cfg

    def lines(self) -> list[str]:
        return [f"{k}={_format(v)}" for k, v in sorted(self.values.items())]

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def one_line(self) -> str:
        return ";".join(self.lines())

    # -- typed views ----------------------------------------------------

    def synth(self) -> SynthConfig:
        return SynthConfig(**{k[6:]: v for k, v in self.values.items() if k.startswith("synth.")},
                           seed=self["seed"])

    def layer_dims(self, input_dim: int) -> tuple[int, ...]:
        return (input_dim, *self["model.hidden"], self["model.emb_dim"])

    def budget(self, key: str):
        raw = self[key]
        if raw == "all":
            return raw
        if not raw.isdigit():
            raise ConfigError(f"{key} must be a non-negative count or 'all', got {raw!r}")
        return int(raw)

    def ssl(self, input_dim: int) -> SslConfig:
        return SslConfig(
            layer_dims=self.layer_dims(input_dim),
            batch_size=self["ssl.batch_size"],
            queue_size=self["ssl.queue_size"],
            tau=self["ssl.tau"],
            ema_momentum=self["ssl.ema_momentum"],
            epochs=self["ssl.epochs"],
            sgd=SgdConfig(self["ssl.lr"], 1, self["ssl.weight_decay"], self["ssl.momentum"]),
            policy=AugmentPolicy(self["aug.gaussian_sigma"], self["aug.mask_fraction"], self["aug.scale_jitter"]),
            seed=self["seed"],
        )

    def sup(self, input_dim: int) -> SupConfig:
        return SupConfig(
            layer_dims=self.layer_dims(input_dim),
            batch_size=self["sup.batch_size"],
            epochs=self["sup.epochs"],
            sgd=SgdConfig(self["sup.lr"], 1, self["sup.weight_decay"], self["sup.momentum"]),
            seed=self["seed"],
        )

    def probe(self) -> ProbeConfig:
        return ProbeConfig(self["probe.l2_lambda"], self["probe.max_iters"], self["probe.step_size"],
                           self["probe.grad_tolerance"])

    def episodes(self) -> EpisodeSpec:
        return EpisodeSpec(self["eval.ways"], self["eval.shots"], self["eval.queries"],
                           self["eval.episodes"], self["seed"])
