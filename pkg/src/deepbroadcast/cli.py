"""Command-line entry point.

Subcommands: ``fetch-data``, ``train``, ``eval``, ``sweep``, ``compare``, ``plot``,
``selftest`` and ``run`` (train + sweep every variant of a case).  Exit status is 0
on success, 2 on a configuration error (the message names the field) and 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, load_checkpoint
from .config import PRESETS, ConfigError, ExperimentConfig, apply_overrides, config_from_dict, dump_config, \
    expand_preset, load_config
from .data import DataError, fetch_cifar10
from .evaluation import compare_variants, read_metrics_csv, write_metrics_csv

log = logging.getLogger("deepbroadcast")

_NUMBER = re.compile(r"^-\d")


def parse_grid(text: str) -> List[float]:
    """``start:stop:step`` (inclusive stop) or a comma list; ``inf`` is allowed."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step))
            grid = [start + k * step for k in range(n + 1)]
            return [g for g in grid if g <= stop + 1e-9]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR grid {text!r}; use start:stop:step or a,b,c") from None


def _fix_negative_values(argv: List[str]) -> List[str]:
    """Glue ``--grid -5:19:2`` into ``--grid=-5:19:2`` so argparse does not read it as a flag."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--grid" and i + 1 < len(argv) and _NUMBER.match(argv[i + 1]):
            out.append(f"--grid={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML experiment file")
    p.add_argument("--preset", choices=PRESETS, help="start from a case preset instead of a file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. trainer.seed=7 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepbroadcast", description="Broadcast semantic communication experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download CIFAR-10 (binary version)")
    p.add_argument("--dest", type=Path, help="target directory (default $DEEPBROADCAST_DATA or ./data)")

    p = sub.add_parser("train", help="train one variant")
    _config_args(p)
    p.add_argument("--variant", help="model variant (default: first of the config's list)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--run-dir", type=Path, help="output directory (default: fresh dir under output_dir)")
    p.add_argument("--resume", type=Path, metavar="CKPT", help="continue training from a checkpoint")

    for name, helptext in (("eval", "print SNR-averaged metrics of a checkpoint"),
                           ("sweep", "evaluate a checkpoint over an SNR grid, write CSV + charts")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--grid", type=parse_grid)
        p.add_argument("--repeats", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("compare", help="average table and per-SNR gaps across metric CSVs")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--reference", help="variant the gaps are taken against")
    p.add_argument("--out", type=Path, help="write the comparison CSV here")

    p = sub.add_parser("plot", help="render charts from a metrics CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--format", default="svg", choices=("svg", "png", "pdf"))

    sub.add_parser("selftest", help="fast numerical checks (channel, KL, gradients)")

    p = sub.add_parser("run", help="train and sweep every variant of an experiment")
    _config_args(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--variant", action="append", dest="variants")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        return load_config(args.config, args.overrides)
    return apply_overrides(expand_preset(args.preset or "custom"), args.overrides)


def _cmd_fetch(args):
    path = fetch_cifar10(args.dest)
    print(f"CIFAR-10 ready in {path}")


def _cmd_train(args):
    from .experiments import load_dataset
    from .trainer import resume, train

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = apply_overrides(config_from_dict(ckpt.experiment), args.overrides)
        ds = load_dataset(cfg)
        run_dir = args.run_dir or (args.resume if args.resume.is_dir() else args.resume.parent)
        dump_config(cfg, Path(run_dir) / "config.yaml")
        out = resume(ckpt, ds, epochs=args.epochs or 1, cfg=cfg, variant=args.variant, run_dir=run_dir)
    else:
        cfg = resolve_config(args)
        ds = load_dataset(cfg)
        run_dir = args.run_dir if args.run_dir else True
        if args.variant and args.variant not in cfg.variants:
            cfg = apply_overrides(cfg, [f"variants=[{args.variant}]"])
        out = train(cfg, ds, variant=args.variant, run_dir=run_dir, epochs=args.epochs)
        run_dir = args.run_dir or max(Path(cfg.output_dir).glob(f"{out.variant}-{cfg.digest()}-*"))
    last = out.metrics[-1] if out.metrics else {}
    print(f"trained {out.variant} to epoch {out.epoch}: loss {last.get('loss', float('nan')):.5f}")
    print(f"run directory: {run_dir}")


def _sweep_ckpt(args):
    from .experiments import load_dataset, sweep_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    cfg = apply_overrides(config_from_dict(ckpt.experiment), args.overrides)
    out = args.out or (args.ckpt if args.ckpt.is_dir() else args.ckpt.parent) / args.command
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = sweep_checkpoint(ckpt, cfg, load_dataset(cfg), grid=args.grid, repeats=args.repeats)
    return result, out


def _cmd_eval(args):
    result, out = _sweep_ckpt(args)
    write_metrics_csv(result, out / "metrics.csv")
    print(compare_variants([result]).format())


def _cmd_sweep(args):
    from .plotting import emit_plots

    result, out = _sweep_ckpt(args)
    for path in emit_plots(result, out):
        print(path)


def _cmd_compare(args):
    cmp = compare_variants([read_metrics_csv(p) for p in args.csv], reference=args.reference)
    print(cmp.format())
    if args.out:
        cmp.write_csv(args.out)
        print(f"wrote {args.out}")


def _cmd_plot(args):
    from .plotting import emit_plots

    out = args.out or args.csv.parent
    for path in emit_plots(read_metrics_csv(args.csv), out, fmt=args.format, csv_name=args.csv.name
                           if out.resolve() == args.csv.parent.resolve() else "metrics.csv"):
        print(path)


def _cmd_selftest(args):
    from .selftest import run_selftest

    if not run_selftest():
        raise RuntimeError("selftest failed")


def _cmd_run(args):
    from .experiments import load_dataset, run_case

    cfg = resolve_config(args)
    out = args.out or Path(cfg.output_dir)
    (out / cfg.preset).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / cfg.preset / "config.yaml")
    results = run_case(cfg, load_dataset(cfg), out, variants=args.variants)
    print(compare_variants(list(results.values())).format())


COMMANDS = {
    "fetch-data": _cmd_fetch, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
    "compare": _cmd_compare, "plot": _cmd_plot, "selftest": _cmd_selftest, "run": _cmd_run,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = _fix_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
