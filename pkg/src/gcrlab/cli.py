"""Command line entry point: ``gcrlab <subcommand> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, RunConfig, load_config, parse_override, merge
from .data import DatasetError, read_all
from .evaluation import SupportError, UndefinedAUCError
from .rl import ALGORITHMS
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set trainer.n_batches=20")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--seed", type=int, help="override seed")
    common.add_argument("--workers", type=int, help="parallel processes for data generation")
    common.add_argument("--quiet", action="store_true")

    p = _Parser(prog="gcrlab", description="Slate re-ranking experiments on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write logged slates and candidate sets")
    tc = sub.add_parser("train-critic", parents=[common], help="train the slate critic and comparison models")
    tc.add_argument("--models", default="fsc",
                    help="comma list from fsc, pointwise, ncand, an ablation name, or 'grid' for everything")
    tp = sub.add_parser("train-policy", parents=[common], help="train re-ranking policies against the critic")
    tp.add_argument("--algorithm", action="append", choices=ALGORITHMS, required=True)
    evp = sub.add_parser("evaluate", parents=[common], help="EvalReport for the critic and optionally a policy")
    evp.add_argument("--algorithm", choices=ALGORITHMS)
    va = sub.add_parser("visualize-attention", parents=[common], help="export the pair-influence matrix as CSV")
    va.add_argument("--input", type=Path, help="slate dataset; the first record is used (default: packaged demo)")
    va.add_argument("--output", type=Path)
    va.add_argument("--critic", default="fsc")
    sub.add_parser("report", parents=[common], help="comparison tables from existing checkpoints")
    pc = sub.add_parser("print-config", parents=[common], help="print the effective config as YAML")
    pc.add_argument("--provenance", action="store_true", help="print only the headline hyperparameters")
    return p


def resolve_config(args) -> RunConfig:
    overrides: dict = {}
    for text in args.overrides:
        overrides = merge(overrides, parse_override(text))
    for key in ("output_dir", "seed", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _write_provenance(cfg: RunConfig, command: str) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "provenance": cfg.provenance(), "config": cfg.to_dict()}
    (cfg.out / f"provenance-{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(args) -> int:
    cfg = resolve_config(args)
    log = (lambda *_: None) if args.quiet else print
    ex.deterministic()
    cmd = args.command
    if cmd == "print-config":
        print(json.dumps(cfg.provenance(), indent=2) if args.provenance else cfg.to_yaml(), end="\n")
        return EXIT_OK
    _write_provenance(cfg, cmd)
    if cmd == "gen-data":
        ex.gen_data(cfg, log)
    elif cmd == "train-critic":
        names = [n.strip() for n in args.models.split(",") if n.strip()]
        if names == ["grid"]:
            names = ["pointwise", "ncand"] + [v for v in ex.critic_variants(cfg) if v != "fsc"] + ["fsc"]
        ex.train_critics(cfg, names, log)
    elif cmd == "train-policy":
        ex.train_policies(cfg, args.algorithm, log)
    elif cmd == "evaluate":
        ex.evaluate(cfg, args.algorithm, log)
    elif cmd == "visualize-attention":
        sample = None
        if args.input is not None:
            records, _ = read_all(args.input, expect="slate")
            if not records:
                raise DatasetError(f"{args.input} holds no slates")
            sample = records[0]
        out = args.output or cfg.out / "eval" / "attention.csv"
        mat = ex.attention(cfg, out, sample, args.critic)
        log(f"{mat.shape[0]}x{mat.shape[1]} attention matrix -> {out}")
    elif cmd == "report":
        ex.report(cfg, log)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"gcrlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, UndefinedAUCError, SupportError, OSError) as exc:
        print(f"gcrlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"gcrlab: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
