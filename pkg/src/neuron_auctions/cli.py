"""Command-line entry point: ``neuron-auctions <command> [--config F] [--seed N] ...``.

Errors go to stderr as a single JSON line ``{"error": code, "message": ...}``
and the process exits with status 1. Artifacts never contain prose.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import torch

from . import pipeline
from .errors import NeuronAuctionError

EXIT_ERROR = 1


def _common(p: argparse.ArgumentParser, defaults: bool) -> None:
    # flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand from clobbering a value given at the top level
    d = None if defaults else argparse.SUPPRESS
    p.add_argument("--config", default=d, help="INI file with per-stage sections")
    p.add_argument("--seed", type=int, default=d, help="global seed, overrides [pipeline] seed")
    p.add_argument("--jobs", type=int, default=d, help="worker threads for attribution and sweeps")
    p.add_argument("--out-dir", default=d, help="run directory, overrides [pipeline] out_dir")
    p.add_argument("--force", action="store_true", default=False if defaults else argparse.SUPPRESS,
                   help="overwrite existing artifacts")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   default=[] if defaults else argparse.SUPPRESS, help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuron-auctions", description=__doc__.splitlines()[0])
    _common(parser, True)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "make-world": "generate the synthetic brand world",
        "train-lm": "train the toy language model",
        "attribute": "integrated-gradients attribution tables for every brand",
        "sweep": "joint k sweep, surface CSV and SVG heatmaps",
        "fit-effects": "fit click-through curves and the quality grid",
        "train-menu": "train the pricing networks",
        "eval": "evaluate the mechanism, VCG baseline, DSIC check and w_user sweep",
        "report": "collect results and the provenance chain into report.json",
        "all": "run every stage in order",
        "show-config": "print the effective configuration",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text), False)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise pipeline.ConfigurationError(f"--set {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["pipeline.seed"] = str(args.seed)
    if args.jobs is not None:
        out["pipeline.jobs"] = str(args.jobs)
    if args.out_dir is not None:
        out["pipeline.out_dir"] = args.out_dir
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    # one intra-op thread keeps floating-point reductions, and so the
    # artifacts, identical across machines
    torch.set_num_threads(1)
    try:
        cfg = pipeline.load_config(args.config, _overrides(args))
        if args.command == "show-config":
            cfg.parser.write(sys.stdout)
            return 0
        if args.command == "all":
            doc = pipeline.run_all(cfg, args.force)
        else:
            doc = pipeline.COMMANDS[args.command](cfg, args.force)
        print(f"wrote {cfg.path(doc['artifact'])}")
        if doc["artifact"] == "report":
            print(pipeline.summarize_report(doc["payload"]))
        return 0
    except NeuronAuctionError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("filesystem", str(e))
    except OSError as e:
        return _fail("filesystem", str(e))
    except ValueError as e:
        return _fail("invalid", str(e))


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
