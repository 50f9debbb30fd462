#!/usr/bin/env python3
"""Run the hyperparameter / strategy ablation grid.

Thin wrapper over `d2ssl ablation`; prints the summary table when done.

Usage: python scripts/run_ablation.py --out runs/ablation [--key value ...]
"""

import sys

from d2ssl.cli import main as cli_main


def main():
    argv = ["ablation"] + sys.argv[1:]
    code = cli_main(argv)
    if code == 0:
        try:
            out = argv[argv.index("--out") + 1]
            with open(f"{out}/ablation_summary.csv") as fh:
                print(fh.read())
        except (ValueError, OSError):
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
