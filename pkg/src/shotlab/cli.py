"""shotlab command line: synth, train, embed, fuse, eval, curve.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .contrastive import write_trace_csv
from .encoder import FormatError
from .episodes import evaluate, fuse_features
from .numeric import DivergedError
from .pipeline import TfslNotShipped, checkpoint_features, train_setting
from .protocol import (DatasetTable, Setting, dataset_paths, load_dataset, load_features, load_meta,
                       save_dataset, save_features, synth_generate)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value


def _resolve(args, flag_keys: dict[str, str] = {}) -> RunConfig:
    overrides = dict(args.set or [])
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def _write_config(path: Path, cfg: RunConfig) -> None:
    path.write_text(cfg.dumps())


def _load_data(prefix) -> DatasetTable:
    meta, feat = dataset_paths(prefix)
    return load_dataset(meta, feat)


def _table_from_meta(features, meta_path) -> DatasetTable:
    labels, split = load_meta(meta_path)
    if features.shape[0] != len(labels):
        raise FormatError(f"row-count mismatch: {len(labels)} metadata rows, {features.shape[0]} feature rows")
    return DatasetTable(features, labels, split)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    table = synth_generate(cfg.synth())
    meta, feat = dataset_paths(args.out)
    save_dataset(table, meta, feat)
    _write_config(Path(f"{args.out}.config.txt"), cfg)
    print(f"wrote {len(table)} rows to {meta} and {feat}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    table = _load_data(args.data)
    models = train_setting(table, Setting(args.setting), cfg, tfsl_recipe=args.tfsl_recipe)
    outs = [Path(args.out)] + [Path(f"{args.out}.{m.kind}") for m in models[1:]]
    for model, path in zip(models, outs):
        model.save(path)
        write_trace_csv(f"{path}.trace.csv", model.trace)
        _write_config(Path(f"{path}.config.txt"), cfg)
        last = f"final loss {model.trace[-1].loss:.4f}" if model.trace else "no steps"
        print(f"wrote {model.kind} checkpoint {path} ({last})")
    return EXIT_OK


def cmd_embed(args) -> int:
    feats = load_features(dataset_paths(args.data)[1])
    out = checkpoint_features(args.model, feats, args.penultimate)
    save_features(args.out, out)
    print(f"wrote {out.shape[0]}x{out.shape[1]} features to {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    fused = fuse_features(load_features(args.a), load_features(args.b))
    save_features(args.out, fused)
    print(f"wrote {fused.shape[0]}x{fused.shape[1]} fused features to {args.out}")
    return EXIT_OK


EVAL_FLAGS = {"ways": "eval.ways", "shots": "eval.shots", "queries": "eval.queries",
              "episodes": "eval.episodes"}


def _eval_one(args, cfg: RunConfig, features, table):
    report = evaluate(features, table, cfg.episodes(), cfg.probe(), normalize=cfg["eval.normalize"],
                      feature_file=str(args.features), workers=args.workers)
    d = report.to_dict()
    d["config"] = cfg.lines()
    return report, d


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_FLAGS)
    table = _table_from_meta(load_features(args.features), args.meta)
    report, d = _eval_one(args, cfg, table.features, table)
    if args.out:
        Path(args.out).write_text(json.dumps(d, indent=2) + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_curve(args) -> int:
    try:
        shots = [int(s) for s in args.shots_list.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--shots-list must be comma-separated integers, got {args.shots_list!r}") from None
    if not shots:
        raise UsageError("--shots-list is empty")
    table = _table_from_meta(load_features(args.features), args.meta)
    reports = []
    for m in shots:
        args.shots = m
        cfg = _resolve(args, EVAL_FLAGS)
        report, d = _eval_one(args, cfg, table.features, table)
        reports.append(d)
        print(f"{m}-shot {report.summary()}")
    if args.out:
        Path(args.out).write_text(json.dumps(reports, indent=2) + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shotlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output prefix (.meta.csv, .fslf)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model under a setting")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset prefix")
    sp.add_argument("--setting", required=True, choices=[s.value for s in Setting])
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--tfsl-recipe", action="store_true",
                    help="for tfsl: supervised on labeled base plus SSL on unlabeled novel")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="extract features with a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="dataset prefix")
    sp.add_argument("--out", required=True)
    sp.add_argument("--penultimate", action="store_true", help="backbone output instead of logits")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("fuse", help="combine two feature files")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fuse)

    for name, func, help_ in (("eval", cmd_eval, "episodic evaluation"),
                              ("curve", cmd_curve, "evaluation across shot counts")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--features", required=True)
        sp.add_argument("--meta", required=True)
        sp.add_argument("--ways", type=int)
        sp.add_argument("--queries", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", help="JSON report path")
        if name == "eval":
            sp.add_argument("--shots", type=int)
        else:
            sp.add_argument("--shots-list", required=True)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            return args.func(args)
    except (UsageError, ConfigError, TfslNotShipped) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
