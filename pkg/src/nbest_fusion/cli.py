"""Command line entry point: ``nbest-fusion <command> --workdir DIR [--section.key=value ...]``.

The effective config is ``--config FILE`` if given, else ``DIR/config.json``
if an earlier command left one, else the defaults; overrides apply on top and
the result is written back to ``DIR/config.json`` so later stages agree with
earlier ones.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigKeyError, RunConfig

COMMANDS = {
    "make-task": "sample the toy task: translator pairs and the fusion pool",
    "train-translator": "fit the toy translator that produces N-best lists",
    "decode": "beam-decode the fusion pool into N-best lists",
    "build-dataset": "split the decoded N-best lists into train/dev/test records",
    "pretrain-lm": "pretrain the frozen base language model",
    "train": "finetune adapter or LoRA parameters on the fusion records",
    "generate": "fuse the test split with a finetuned run",
    "evaluate": "score fusion, 1-best and oracle outputs on the test split",
    "ablate-n": "sweep the number of hypotheses shown to the model",
    "compare-tuning": "train adapter and LoRA on identical data and compare",
    "export-ngrams": "export reference n-gram coverage and 2-D character n-gram points",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbest-fusion", description="N-best hypothesis fusion pipeline.",
                                     epilog="Any config key can be overridden as --section.key=value.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--workdir", required=True, type=Path)
        p.add_argument("--config", type=Path, help="JSON run config (default: WORKDIR/config.json)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "decode":
            p.add_argument("--beam", type=int, help="shorthand for --decode.beam_size")
        if name in ("train", "generate", "evaluate"):
            p.add_argument("--mode", choices=["adapter", "lora"])
            p.add_argument("--n-use", type=int)
        if name == "evaluate":
            p.add_argument("--baseline", action="store_true",
                           help="score only the translator 1-best; needs no fusion run")
    return parser


def split_overrides(extra: list[str]) -> tuple[list[str], list[str]]:
    """Pull ``--section.key=value`` (or ``--section.key value``) out of unparsed args."""
    overrides, rest = [], []
    i = 0
    while i < len(extra):
        arg = extra[i]
        key = arg[2:].split("=", 1)[0]
        if arg.startswith("--") and "." in key:
            if "=" in arg:
                overrides.append(arg[2:])
            elif i + 1 < len(extra):
                overrides.append(f"{key}={extra[i + 1]}")
                i += 1
            else:
                raise ConfigKeyError(f"override {arg} has no value")
        else:
            rest.append(arg)
        i += 1
    return overrides, rest


def load_config(args, overrides: list[str]) -> RunConfig:
    if args.config is not None:
        config = RunConfig.load(args.config)
    elif (args.workdir / "config.json").exists():
        config = RunConfig.load(args.workdir / "config.json")
    else:
        config = RunConfig()
    if getattr(args, "beam", None) is not None:
        overrides = overrides + [f"decode.beam_size={args.beam}"]
    return config.with_overrides(overrides)


def dispatch(args, wd: pl.Workdir):
    c = args.command
    if c == "make-task":
        return pl.make_task(wd)
    if c == "train-translator":
        return pl.train_translator_stage(wd)
    if c == "decode":
        return pl.decode_stage(wd)
    if c == "build-dataset":
        return pl.build_dataset_stage(wd)
    if c == "pretrain-lm":
        return pl.pretrain_stage(wd)
    if c == "train":
        return pl.train_stage(wd, args.mode, args.n_use)
    if c == "generate":
        return pl.generate_stage(wd, args.mode, args.n_use)
    if c == "evaluate":
        return pl.evaluate_baseline(wd) if args.baseline else pl.evaluate_stage(wd, args.mode, args.n_use)
    if c == "ablate-n":
        return pl.ablate_n_stage(wd)
    if c == "compare-tuning":
        return pl.compare_tuning_stage(wd)
    if c == "export-ngrams":
        return pl.export_ngrams_stage(wd)
    if c == "run-all":
        return pl.run_all(wd)
    raise AssertionError(c)


def _summary(result) -> dict:
    # manifests carry digests and versions; print only the headline numbers
    if isinstance(result, dict) and "main" in result:
        return {"main": result["main"], "compare": result["compare"]}
    if isinstance(result, dict) and "outputs" in result:
        return {"stage": result["stage"], "outputs": sorted(result["outputs"])}
    return result


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides, rest = split_overrides(extra)
        if rest:
            parser.error(f"unrecognized arguments: {' '.join(rest)}")
        config = load_config(args, overrides)
    except (ConfigKeyError, TypeError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    args.workdir.mkdir(parents=True, exist_ok=True)
    config.save(args.workdir / "config.json")
    try:
        result = dispatch(args, pl.Workdir(args.workdir, config))
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # any other failure still names the stage
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_summary(result), indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
