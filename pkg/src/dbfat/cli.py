"""Command line entry point: ``dbfat {partition,train,evaluate,probe}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .config import ConfigError
from .data import IdxFormatError
from .federation import CheckpointError
from . import runner

log = logging.getLogger("dbfat")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    p.add_argument("-o", "--output", help="output directory (default: run.output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dbfat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split training data across clients")
    _common(p)

    p = sub.add_parser("train", help="run federated training")
    _common(p)
    p.add_argument("--threads", type=int, default=1, help="parallel client workers")
    p.add_argument("--sweep", metavar="SECTION.KEY=V1,V2,...",
                   help="one run per value, each in its own subdirectory")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--grid-resolution", type=int, default=100)

    p = sub.add_parser("probe", help="boundary-distance histogram for one client")
    _common(p)
    p.add_argument("--checkpoint", help="model to probe (default: freshly initialised)")
    p.add_argument("--client", type=int, default=0)
    return ap


def _resolve(args, extra=()) -> config_mod.ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    overrides.extend(extra)
    return config_mod.resolve(config_mod.load(args.config, overrides))


def _sweep_values(spec: str) -> tuple[str, list[str]]:
    key, sep, values = spec.partition("=")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not sep or "." not in key or not vals:
        raise UsageError(f"--sweep expects SECTION.KEY=V1,V2,..., got {spec!r}")
    return key.strip(), vals


def run(args) -> None:
    if args.command == "partition":
        path = runner.cmd_partition(_resolve(args), args.output)
        print(path)
    elif args.command == "train":
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.sweep:
            key, values = _sweep_values(args.sweep)
            base = Path(args.output) if args.output else _resolve(args).output_dir
            for v in values:
                cfg = _resolve(args, [f"{key}={v}"])
                out = runner.cmd_train(cfg, base / f"{key.split('.')[-1]}_{v}", args.threads)
                print(out / "metrics.csv")
        else:
            out = runner.cmd_train(_resolve(args), args.output, args.threads)
            print(out / "metrics.csv")
    elif args.command == "evaluate":
        out = runner.cmd_evaluate(args.checkpoint, _resolve(args), args.output,
                                  args.grid_resolution)
        print(out / "metrics.csv")
    elif args.command == "probe":
        print(runner.cmd_probe(_resolve(args), args.checkpoint, args.client, args.output))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        run(args)
    except runner.CheckpointNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
