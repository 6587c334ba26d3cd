"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 missing input, 4 runtime failure,
5 report written from partially corrupted logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .attack import AttackError
from .config import ConfigError, load_config
from .datagen import DataGenError
from .experiments import (
    GateError,
    IncompatibleRunError,
    MissingInputError,
    cmd_attack,
    cmd_evaluate,
    cmd_generate,
    cmd_report,
    cmd_train,
)
from .fed import TrainingError
from .metrics import MetricsError
from .model import ModelError
from .snapshot import SnapshotError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4, 5

log = logging.getLogger("semfl")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--desk-scale", action="store_true", help="64x64 images, 40-image manifest, depth-2 U-Net")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semfl", description="Federated segmentation and gradient-inversion workbench.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize the SEM dataset and its manifest")
    sub.add_parser("train", parents=[common], help="run one CL or FL experiment")
    at = sub.add_parser("attack", parents=[common], help="reconstruct a victim image from weight snapshots")
    at.add_argument("--approximate", action="store_true", help="attack even if the update is not one exact gradient step")
    ev = sub.add_parser("evaluate", parents=[common], help="compare two image files")
    ev.add_argument("image_a")
    ev.add_argument("image_b")
    ev.add_argument("--mask", help="ground-truth mask; scores image_a as a reconstruction of image_b")
    rp = sub.add_parser("report", parents=[common], help="tables and plots from a results directory")
    rp.add_argument("results_dir", nargs="?", help="defaults to --out or the config's out_dir")
    return p


def _config(args):
    return load_config(args.config, seed=args.seed, out_dir=args.out, desk_scale=args.desk_scale)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            print(json.dumps(cmd_evaluate(args.image_a, args.image_b, args.mask), indent=2))
            return EXIT_OK
        if args.command == "report":
            root = args.results_dir or args.out or _config(args).out_dir
            summary = cmd_report(root)
            print(json.dumps({k: v for k, v in summary.items() if k != "table"}, indent=2))
            return EXIT_PARTIAL if summary["partial"] else EXIT_OK
        cfg = _config(args)
        if args.command == "generate":
            print(cmd_generate(cfg))
        elif args.command == "train":
            print(json.dumps(cmd_train(cfg)))
        elif args.command == "attack":
            for rep in cmd_attack(cfg, approximate=args.approximate):
                m = rep.metrics
                print(json.dumps({"alpha": rep.alpha, "provenance": rep.provenance, **(m.to_json() if m else {})}))
        return EXIT_OK
    except (ConfigError, IncompatibleRunError) as err:
        log.error("%s", err)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as err:
        log.error("%s", err)
        return EXIT_MISSING
    except (GateError, AttackError, TrainingError, ModelError, DataGenError, MetricsError, SnapshotError, RuntimeError) as err:
        log.error("%s", err)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
