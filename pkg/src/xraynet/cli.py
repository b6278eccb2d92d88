"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or configuration error. Output
files are written to a temp file and renamed, so a failed run never leaves a
partial file behind.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .data import load_image_set, load_manifest, plan_folds
from .errors import XrayNetError
from .harness import load_experiment_config, run_cross_validation, train
from .metrics import ConfusionMatrix, emit_report, metrics_line, report_from_json
from .model import StrategyConfig, apply_strategy, build_model
from .weights import atomic_write_bytes, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xraynet", description="Pulmonary X-ray classification experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("folds", help="write a stratified fold plan for a manifest")
    f.add_argument("--manifest", required=True)
    f.add_argument("--k", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out")

    for name, helptext in (("train", "train one model on the whole manifest"),
                           ("crossval", "run k-fold cross-validation")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True)
        c.add_argument("--out", required=name == "train")
        c.add_argument("--manifest")
        c.add_argument("--strategy", help="scratch | offtheshelf | finetune:K")
        c.add_argument("--weights", help="pretrained SNWT file for offtheshelf/finetune")
        c.add_argument("--seed", type=int)
        if name == "crossval":
            c.add_argument("--k", type=int)
            c.add_argument("--format", choices=("json", "csv", "table"), default="json")
            c.add_argument("--parallel-folds", type=int, default=1)

    m = sub.add_parser("metrics", help="metrics for a 7x7 confusion-matrix CSV")
    m.add_argument("--matrix", required=True)
    m.add_argument("--out")

    r = sub.add_parser("report", help="re-render a JSON cross-validation report")
    r.add_argument("--cv", required=True, help="JSON report written by crossval")
    r.add_argument("--format", choices=("json", "csv", "table"), default="table")
    r.add_argument("--out")
    return p


def _write(out: Optional[str], text: str):
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_bytes(out, text.encode("utf-8"))


def _experiment(args):
    cfg = load_experiment_config(args.config)
    if args.manifest:
        cfg.manifest = Path(args.manifest)
    if args.strategy or args.weights:
        weights = args.weights or cfg.strategy.pretrained_weights_path
        text = args.strategy or str(cfg.strategy)
        cfg.strategy = StrategyConfig.parse(text, None if text == "scratch" else weights)
    if args.seed is not None:
        cfg.hyperparams = replace(cfg.hyperparams, seed=args.seed)
    if cfg.manifest is None:
        raise XrayNetError(f"{args.config}: no manifest given (set 'manifest' or pass --manifest)")
    return cfg


def cmd_folds(args):
    manifest = load_manifest(args.manifest)
    _write(args.out, plan_folds(manifest, args.k, args.seed).to_csv())


def cmd_train(args):
    cfg = _experiment(args)
    data = load_image_set(load_manifest(cfg.manifest), cfg.model.input_size, cfg.contrast_threshold)
    model = apply_strategy(build_model(cfg.model, cfg.hyperparams.seed), cfg.strategy)
    result = train(model, data, cfg.hyperparams, cfg.augment)
    save_weights(model, args.out)
    logging.getLogger(__name__).info("final epoch loss %.5f", result.losses[-1])


def cmd_crossval(args):
    cfg = _experiment(args)
    data = load_image_set(load_manifest(cfg.manifest), cfg.model.input_size, cfg.contrast_threshold)
    report = run_cross_validation(
        data,
        cfg.model,
        cfg.strategy,
        cfg.hyperparams,
        k=args.k or cfg.k,
        augment_cfg=cfg.augment,
        checkpoint_dir=cfg.checkpoint_dir,
        parallel_folds=max(1, args.parallel_folds),
    )
    text = emit_report(report, args.format)
    _write(args.out, text)


def cmd_metrics(args):
    path = Path(args.matrix)
    cm = ConfusionMatrix.from_csv(path.read_text(encoding="utf-8"), path)
    _write(args.out, metrics_line(cm) + "\n")


def cmd_report(args):
    path = Path(args.cv)
    report = report_from_json(path.read_text(encoding="utf-8"))
    _write(args.out, emit_report(report, args.format))


COMMANDS = {
    "folds": cmd_folds,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage() + str(exc) + "\n")
        return EXIT_USAGE
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (XrayNetError, OSError, ValueError) as exc:
        name = getattr(exc, "filename", None)
        prefix = f"{name}: " if name and str(name) not in str(exc) else ""
        sys.stderr.write(f"xraynet {args.command}: {prefix}{exc}\n")
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
