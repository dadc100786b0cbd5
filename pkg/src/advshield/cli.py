"""Command-line entry point: ``advshield <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attack import attack_trial_set
from .config import ConfigError, load_config
from .dataio import load_trials, save_features, save_trials
from .report import emit_report
from .runner import Pipeline, StageError, run_experiment

_STAGE_COMMANDS = {
    "gen-data": "data",
    "train-asv": "asv",
    "train-reformer": "reformers",
    "eval-purify": "purify",
    "eval-detect": "detect",
    "finetune": "finetune",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted config key; repeatable")
    p.add_argument("--output-dir", help="pipeline working directory (config key output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advshield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in _STAGE_COMMANDS.items():
        _common(sub.add_parser(name, help=f"run the {stage} stage and everything upstream of it"))
    atk = sub.add_parser("attack", help="BIM-attack a trial list and write adversarial features")
    _common(atk)
    atk.add_argument("--epsilon", type=float)
    atk.add_argument("--alpha", type=float)
    atk.add_argument("--iters", type=int)
    atk.add_argument("--aware-blocks", type=int)
    atk.add_argument("--trials", type=Path, help="trial list over held-out utterances (default: all held-out trials)")
    atk.add_argument("--out", type=Path, help="export directory for features/ and trials")
    rep = sub.add_parser("report", help="run the pipeline and write tables, summary and figures")
    _common(rep)
    rep.add_argument("--out", type=Path, help="report directory (default: <output_dir>/report)")
    _common(sub.add_parser("all", help="run the full pipeline and write the report"))
    return parser


def _parse_overrides(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _config(args):
    pairs = _parse_overrides(args.overrides)
    if args.output_dir:
        pairs["output_dir"] = args.output_dir
    if args.command == "attack":
        for flag, key in (("epsilon", "attack.epsilon"), ("alpha", "attack.alpha"), ("iters", "attack.n_iters")):
            if getattr(args, flag) is not None:
                pairs[key] = str(getattr(args, flag))
    return load_config(args.config, pairs)


def _attack(args, config) -> Path:
    pipe = Pipeline(config)
    for stage in ("data", "asv", "reformers"):
        pipe.ensure(stage)
    _, heldout, std = pipe.corpora()
    trials = load_trials(args.trials) if args.trials else heldout.trials
    blocks = args.aware_blocks if args.aware_blocks is not None else 0
    attack_cfg = replace(config.attack, aware_blocks=blocks)
    chain = [pipe.reformer(config.cascade.reformer_tag)] * blocks
    adv = attack_trial_set(pipe.asv(), chain, heldout, trials, attack_cfg, std)
    out = args.out or Path(config.output_dir) / "attack_export"
    (out / "feats").mkdir(parents=True, exist_ok=True)
    for uid, feats in adv.features.items():
        save_features(out / "feats" / f"{uid}.asvf", feats)
    save_trials(out / "trials", adv.trials, with_provenance=True)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = _config(args)
        if args.command in _STAGE_COMMANDS:
            print(Pipeline(config).ensure(_STAGE_COMMANDS[args.command]))
        elif args.command == "attack":
            print(_attack(args, config))
        elif args.command == "report":
            bundle = run_experiment(config, emit=False)
            out = args.out or Path(config.output_dir) / "report"
            emit_report(bundle, out)
            print(out)
        else:
            run_experiment(config)
            print(Path(config.output_dir) / "report")
    except (ConfigError, StageError, OSError, ValueError, KeyError) as exc:
        print(f"advshield: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
