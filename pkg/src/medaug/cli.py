"""Command-line entry point: ``medaug <command> --config FILE [--set k=v ...] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from medaug import config as cfgmod
from medaug import runner
from medaug.errors import ConfigError, IngestError, MedAugError, NumericAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

COMMANDS = ("generate", "pretrain", "evaluate", "analyze-pairs", "benchmark", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # bad usage is a configuration error
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="medaug", description="Metadata-driven contrastive pretraining workbench.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("--out", required=True, help="run or benchmark directory")
            continue
        p.add_argument("--config", help="run config (.cfg); defaults apply when omitted")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override")
        p.add_argument("--seed", type=int, help="shortcut for --set run.seed=N")
        p.add_argument("--out", help="output directory (default: run.out)")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="evaluate this checkpoint instead of selecting one")
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    cfg = cfgmod.apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    return cfg.validate()


def run(args) -> int:
    if args.command == "report":
        print(runner.cmd_report(args.out))
        return EXIT_OK
    cfg = resolve_config(args)
    if args.command == "generate":
        print(runner.cmd_generate(cfg, args.out))
    elif args.command == "pretrain":
        print(runner.cmd_pretrain(cfg, args.out))
    elif args.command == "evaluate":
        for report in runner.cmd_evaluate(cfg, args.out, args.checkpoint):
            print(f"{report.mode.value}: {report.mean_auc:.4f} ± {report.std_auc:.4f} ({report.checkpoint_id})")
    elif args.command == "analyze-pairs":
        print(json.dumps(runner.cmd_analyze_pairs(cfg, args.out), indent=2))
    elif args.command == "benchmark":
        rows = runner.cmd_benchmark(cfg, args.out)
        print(runner.cmd_report(args.out or cfg.run.out))
        if any(r["status"] != "ok" for r in rows):
            return 1
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        where = f" (batch dumped to {exc.dump_path})" if exc.dump_path else ""
        print(f"numeric abort: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MedAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
