"""Command-line entry point: ``revrir <command> [options]``.

Errors print one machine-parsable line to stderr::

    revrir-error code=<code> exit=<n> message=<text>

and exit with 2 (validation), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, pipeline
from .config import PRESETS, resolve
from .errors import RevrirError, ValidationError

log = logging.getLogger("revrir")

COMMANDS = ("catalog", "gen-rirs", "build-data", "pretrain", "finetune", "baseline", "evaluate", "report")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file layered over the preset")
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("--seed", type=int, help="run seed (u64)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for generation stages")
    p.add_argument("--out", type=Path, default=Path("runs/desk"), help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revrir", description="Room fingerprinting from reverberant speech.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "finetune":
            p.add_argument("--encoder", choices=("speech", "rir", "both"), default="both")
        if name == "evaluate":
            p.add_argument("--collapse", choices=("none", "types"), default="none")
            p.add_argument("--predictions", type=Path, help="score a prediction,label CSV instead of the run")
        if name == "catalog":
            p.add_argument("--print", action="store_true", help="also write the catalog to stdout")
    return parser


def _flags(args: argparse.Namespace) -> dict:
    flags = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        flags["seed"] = args.seed
    return flags


def _run(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        raise ValidationError("--jobs must be at least 1")
    config, layers = resolve(args.preset, args.config, flags=_flags(args))
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "config_hash": config.hash, "layers": layers, "config": config.to_dict()}
    (out / f"run-{args.command}.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    log.info("config %s (%s)", config.hash[:12], ", ".join(layers))

    cmd = args.command
    if cmd == "catalog":
        catalog = pipeline.stage_catalog(config, out)
        if args.print:
            sys.stdout.write((out / pipeline.CATALOG_FILE).read_text())
        print(f"catalog: {len(catalog)} rooms -> {out / pipeline.CATALOG_FILE}")
    elif cmd == "gen-rirs":
        bank = pipeline.stage_rirs(config, out, args.jobs)
        print(f"gen-rirs: {len(bank)} RIRs -> {out / pipeline.BANK_FILE}")
    elif cmd == "build-data":
        train, val = pipeline.stage_data(config, out)
        print(f"build-data: {len(train)} train / {len(val)} val pairs -> {out / pipeline.DATASET_FILE}")
    elif cmd == "pretrain":
        res = pipeline.stage_pretrain(config, out)
        final = res.train_curve[-1][1] if res.train_curve else float("nan")
        print(f"pretrain: loss {res.initial_loss:.4f} -> {final:.4f}, tau {res.model.tau:.4f}")
    elif cmd == "finetune":
        encoders = pipeline.ENCODERS if args.encoder == "both" else (args.encoder,)
        for enc, res in pipeline.stage_finetune(config, out, encoders).items():
            acc = res.val_accuracy[-1] if res.val_accuracy else float("nan")
            print(f"finetune {enc}: final loss {res.train_loss[-1]:.4f}, val top-1 {acc:.3f}")
    elif cmd == "baseline":
        res = pipeline.stage_baseline(config, out)
        print(f"baseline: top-1 {res.metrics['top1']:.3f}, types {res.metrics['type_top1']:.3f}")
    elif cmd == "evaluate":
        collapse = None if args.collapse == "none" else args.collapse
        if args.predictions is not None:
            catalog = pipeline.load_catalog_artifact(config, out)
            board, table = pipeline.score_predictions(catalog, args.predictions, collapse)
            suffix = "_types" if collapse else ""
            (out / f"confusion_predictions{suffix}.csv").write_text(table)
            print(f"evaluate: top-1 {board['top1']:.4f}, types {board['type_top1']:.4f}")
        else:
            metrics = pipeline.stage_evaluate(config, out, collapse)
            for model, sets in metrics["results"].items():
                for set_name, board in sets.items():
                    print(f"{model} {set_name}: top-1 {board['top1']:.4f}, types {board['type_top1']:.4f}")
    elif cmd == "report":
        path = pipeline.stage_report(out)
        print(f"report -> {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        # one BLAS thread: the determinism reference; non-finite values are
        # caught explicitly, so numpy's own warnings would only add noise
        with threadpool_limits(limits=1), np.errstate(all="ignore"):
            return _run(args)
    except RevrirError as exc:
        message = " ".join(str(exc).split())
        print(f"revrir-error code={exc.code} exit={exc.exit_code} message={message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
