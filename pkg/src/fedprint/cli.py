"""Command-line front end.

Configuration precedence: built-in defaults, then ``--config`` (or the
``config.txt`` left in the output directory by an earlier stage), then flags.
Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .asv import compute_eer
from .attack_a1 import VARIANTS
from .exceptions import ConfigurationError, FedprintError
from .formats import load_scores

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
SUBCOMMANDS = pipeline.STAGES + ("ablate-layers", "run")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _bool(text):
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' file")
    common.add_argument("--out", type=Path, help="artifact directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker cap (default: all cores)")
    common.add_argument("--h", type=_int_list, help="hidden layers, e.g. 1,3,6")
    common.add_argument("--alpha-mu", type=float)
    common.add_argument("--alpha-sigma", type=float)
    common.add_argument("--backend", choices=pipeline.BACKENDS)
    common.add_argument("--nontarget-trials", type=int)
    common.add_argument("--append-speaker-embedding", type=_bool, metavar="BOOL")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedprint",
                                     description="Speaker footprints in personalized models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "evaluate":
            p.add_argument("--scores", type=Path,
                           help="evaluate one scores CSV instead of the output directory")
    return parser


def resolve_config(args) -> config_mod.ExperimentConfig:
    if args.config is not None:
        cfg = config_mod.load(args.config)
    elif args.out is not None and (args.out / "config.txt").exists():
        cfg = config_mod.load(args.out / "config.txt")
    else:
        cfg = config_mod.ExperimentConfig()
    a2_stage = args.command in ("train-a2", "attack-a2")
    flags = {
        "run.out": None if args.out is None else str(args.out),
        "run.seed": args.seed,
        "run.threads": args.threads,
        ("attack.a2_h" if a2_stage else "attack.h"): args.h,
        "attack.alpha_mu": args.alpha_mu,
        "attack.alpha_sigma": args.alpha_sigma,
        "attack.backend": args.backend,
        "trials.n_nontarget": args.nontarget_trials,
        "gen.append_embedding": args.append_speaker_embedding,
    }
    for key, value in flags.items():
        if value is not None:
            cfg = cfg.set(key, value)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = cfg.set(key.strip(), value)
    return pipeline.validate(cfg)


def _print_results(results, out=None):
    out = out or sys.stdout
    for r in results:
        tag = r.get("variant") or r.get("backend") or ""
        print(f"{r['attack']}  {r['partition']:<8} h={r['h']}  {tag:<8} "
              f"EER {100 * r['eer']:.2f}%  ({r['n_target']} tar / {r['n_nontarget']} non)",
              file=out)


def _evaluate_file(path):
    res = compute_eer(load_scores(path))
    print(f"EER {100 * res.eer:.2f}%  threshold {res.threshold!r}  "
          f"({res.n_target} tar / {res.n_nontarget} non)")


def _run(args) -> int:
    if args.command == "evaluate" and args.scores is not None:
        _evaluate_file(args.scores)
        return EXIT_OK
    cfg = resolve_config(args)
    ws = pipeline.Workspace(cfg)
    if args.command == "run":
        report = pipeline.run_pipeline(cfg)
        _print_results(report.results)
        return EXIT_OK
    ws.root.mkdir(parents=True, exist_ok=True)
    if args.command == "generate-data" or not (ws.root / "config.txt").exists():
        (ws.root / "config.txt").write_text(config_mod.emit(cfg))
    if args.command == "ablate-layers":
        table, _ = pipeline.run_stage(
            ws, "ablate-layers", lambda w: pipeline.ablation_table(w, args.h))
        print("h   " + "  ".join(f"{v:>8}" for v in VARIANTS))
        for h, row in table.items():
            print(f"{h:<3} " + "  ".join(f"{100 * row[v]:7.2f}%" for v in VARIANTS))
        return EXIT_OK
    result, _ = pipeline.run_stage(ws, args.command)
    if args.command == "evaluate":
        _print_results(result)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedprintError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
