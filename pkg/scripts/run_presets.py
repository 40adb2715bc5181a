"""Run every built-in preset and write reports under one directory.

    python scripts/run_presets.py --data-dir data/mnist --out-dir out [--skip-mnist] [--parallel N]
"""
import argparse
import sys

from mascl.cli import main as cli_main
from mascl.experiments import PRESETS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--out-dir", default="out")
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--skip-mnist", action="store_true", help="only run the synthetic presets")
    args = ap.parse_args()
    status = 0
    for name, preset in sorted(PRESETS.items()):
        if args.skip_mnist and preset["tasks"]["kind"] == "permuted-mnist":
            continue
        print(f"== {name}")
        code = cli_main(["run", "--preset", name, "--data-dir", args.data_dir,
                         "--out-dir", f"{args.out_dir}/{name}", "--parallel", str(args.parallel)])
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
