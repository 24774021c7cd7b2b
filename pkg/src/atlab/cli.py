"""Command-line entry point: ``atlab <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, load_config, parse_config
from .pipeline import EXIT_CONFIG, Pipeline, StageError
from .report import emit_report, load_report, report_body

logger = logging.getLogger("atlab")

COMMAND_STAGES = {
    "data": ["data"],
    "train": ["data", "surrogate", "atim"],
    "attack": ["attacks"],
    "sweep": ["sweep"],
    "defend": ["defenses"],
    "diagnose": ["diagnostics"],
    "fedsim": ["fedsim"],
    "run": None,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--preset", help="attack preset name (e.g. mnist-madry, fgsm, bim)")
    common.add_argument("--subsample", type=int, help="training examples to keep (stratified)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--stages", help="comma-separated stage list (run only)")
    common.add_argument("--freeze-trigger", action="store_true",
                        help="keep trigger pixels fixed while perturbing")
    common.add_argument("--attack-rounds", help="comma-separated federated rounds the attacker joins")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(prog="atlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "data": "verify or fetch the dataset",
        "train": "train the surrogate and the infected model",
        "attack": "accuracy on benign, trigger, adversarial and combined examples",
        "sweep": "accuracy against iterations, perturbation size and method",
        "defend": "STRIP, trigger reverse engineering and certified accuracy",
        "diagnose": "feature-shift curves and targeted-attack matrix",
        "fedsim": "federated rounds under FedAvg, Krum and an all-honest control",
        "run": "run the configured (or --stages) pipeline",
        "report": "print the metrics of a saved report",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["train.seed"] = str(args.seed)
    if args.preset:
        o["attack.preset"] = args.preset
    if args.subsample is not None:
        o["dataset.subsample"] = str(args.subsample)
    if args.out is not None:
        o["output.dir"] = str(args.out)
    if args.stages:
        o["output.stages"] = args.stages
    if args.freeze_trigger:
        o["trigger.freeze"] = "true"
    if args.attack_rounds is not None:
        o["fedsim.attack_rounds"] = args.attack_rounds
    return o


def _config(args):
    validate = args.command != "report"  # reading a report needs no seed
    if args.config is not None:
        return load_config(args.config, _overrides(args), validate)
    return parse_config("", _overrides(args), validate)


def _merge_previous(pipe: Pipeline) -> None:
    """Keep metrics from earlier commands run against the same config and output directory."""
    path = pipe.out / "report.json"
    if not path.exists():
        return
    try:
        prev = load_report(path)
    except (ValueError, KeyError):
        return
    if prev.config == report_body(pipe.report)["config"]:
        pipe.report.metrics.update(prev.metrics)
        pipe.report.stages.extend(prev.stages)
        pipe.report.wall_clock.update(prev.wall_clock)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output.dir)
    if args.command == "report":
        path = out / "report.json"
        if not path.exists():
            print(f"no report at {path}", file=sys.stderr)
            return EXIT_CONFIG
        prev = load_report(path)
        for k, v in sorted(prev.metrics.items()):
            print(f"{k}: {v}")
        return 0
    try:
        pipe = Pipeline(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    _merge_previous(pipe)
    stages = COMMAND_STAGES[args.command]
    try:
        report = pipe.run(stages)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report.stages = sorted(set(report.stages), key=report.stages.index)
    for p in emit_report(report, out):
        logger.debug("wrote %s", p)
    for k, v in sorted(report.metrics.items()):
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
