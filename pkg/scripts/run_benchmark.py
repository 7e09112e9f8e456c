"""Run one preset benchmark and print its table.

    python3 scripts/run_benchmark.py                      # configs/benchmark.cfg
    python3 scripts/run_benchmark.py table4_laterality --set benchmark.seeds=0
"""

import argparse
import logging
from pathlib import Path

from medaug import config as cfgmod
from medaug import runner

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("preset", nargs="?", default="benchmark", help="config name under configs/ (without .cfg)")
    ap.add_argument("--out", help="output directory (default: the preset's run.out)")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = cfgmod.apply_overrides(cfgmod.load(CONFIGS / f"{args.preset}.cfg"), args.set).validate()
    out = Path(args.out or cfg.run.out)
    runner.cmd_benchmark(cfg, out)
    print(runner.cmd_report(out))


if __name__ == "__main__":
    main()
