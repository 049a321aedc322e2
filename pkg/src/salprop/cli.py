"""``salprop`` command line: gen, train, sweep, infer, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, resolve
from .data import DataError
from .net.train import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("salprop")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", required=True, help="run directory holding every artifact")
    p.add_argument("--config", help="YAML config file layered over the run config (or the defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config value, e.g. train.batch_size=4")


def _maps(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--maps", default=default, choices=["sal", "det", "mix", "all"], help="map variant to threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic train/val/test splits")
    _common(p)
    p.add_argument("--force", action="store_true", help="overwrite existing data")

    p = sub.add_parser("train", help="run the three training stages")
    _common(p)

    p = sub.add_parser("sweep", help="select per-class thresholds on an annotated split")
    _common(p)
    _maps(p, "all")
    p.add_argument("--split", default="val")

    p = sub.add_parser("infer", help="detections and map dumps for one or more variants")
    _common(p)
    _maps(p, "mix")
    p.add_argument("--split", default="test")
    p.add_argument("--max-dumps", type=int, default=None, help="write PGM maps for at most this many images")

    p = sub.add_parser("eval", help="metrics for inferred variants")
    _common(p)
    _maps(p, "mix")
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="Sal / Det / Mix comparison table")
    _common(p)
    p.add_argument("--split", default="test")
    p.add_argument("--sweep-split", default="val")
    p.add_argument("--max-dumps", type=int, default=None)
    return parser


def _variants(choice: str) -> tuple[str, ...]:
    return pipeline.VARIANT_ORDER if choice == "all" else (choice,)


def _config(args) -> dict:
    run = pipeline.Run(args.run)
    base = None
    if args.command != "gen" and run.config_path.exists():
        base = resolve(file=run.config_path)
    return resolve(base, args.config, args.overrides)


def dispatch(args) -> None:
    cfg = _config(args)
    run = pipeline.Run(args.run)
    if args.command == "gen":
        m = pipeline.cmd_gen(run, cfg, args.force)
        print(f"wrote {m['samples']} to {run.root / 'data'} (config {m['config_hash'][:12]})")
    elif args.command == "train":
        m = pipeline.cmd_train(run, cfg)
        print(f"trained {m['steps']} steps; checkpoint {run.model_path}")
    elif args.command == "sweep":
        m = pipeline.cmd_sweep(run, cfg, _variants(args.maps), args.split)
        for v, t in m["thresholds"].items():
            print(f"{v}: {t['thresholds']}")
    elif args.command == "infer":
        m = pipeline.cmd_infer(run, cfg, _variants(args.maps), args.split, args.max_dumps)
        for v, s in m["summary"].items():
            print(f"{v}: {s['images']} images, {s['empty_detections']} empty detections omitted")
    elif args.command == "eval":
        reports = pipeline.cmd_eval(run, cfg, _variants(args.maps), args.split)
        for v, rep in reports.items():
            print(rep.to_table(pipeline.TABLE_LABELS[v]))
    elif args.command == "ablate":
        print(pipeline.cmd_ablate(run, cfg, args.split, args.sweep_split, args.max_dumps))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
