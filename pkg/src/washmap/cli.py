"""Command-line entry point: ``washmap <stage> --config PATH``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import MissingInputError, ValidationError

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_INVALID = 3
EXIT_INTERNAL = 4

STAGE_COMMANDS = ("features", "aggregate", "train", "evaluate", "predict", "explain", "run-all")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="washmap", description="Grid-level WASH access estimation pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", type=Path)
    p = sub.add_parser("synth", help="generate the synthetic fixture world")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=100)
    p.add_argument("--cols", type=int, default=100)
    p.add_argument("--blocks", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--threads", type=int, help="accepted for symmetry; generation is single-threaded")
    return ap


def _synth(args) -> int:
    from .config import write_config_toml
    from .synth import SynthConfig, generate_world

    cfg = SynthConfig(n_rows=args.rows, n_cols=args.cols, n_blocks=args.blocks, noise=args.noise, seed=args.seed)
    manifest = generate_world(args.out, cfg)
    write_config_toml(args.out / "config.toml", manifest.name, out="run", seed=args.seed)
    print(f"wrote {manifest} and {args.out / 'config.toml'}")
    return EXIT_OK


def _stage(args) -> int:
    from . import pipeline
    from .config import load_config, with_overrides

    cfg = with_overrides(load_config(args.config), seed=args.seed, threads=args.threads, out=args.out)
    if args.command == "run-all":
        written = pipeline.run_all(cfg)
    else:
        written = pipeline.RUNNERS[args.command](cfg)
    print(f"{args.command}: wrote {len(written)} files under {cfg.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _synth(args) if args.command == "synth" else _stage(args)
    except MissingInputError as e:
        print(f"washmap {args.command}: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as e:
        print(f"washmap {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"washmap {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
