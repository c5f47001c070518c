"""Command line entry point: plots <results_dir> <out_dir>."""

from __future__ import annotations

import argparse
import sys

from .figures import plot_all
from .tables import MissingColumnError, load_results_dir


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plots", description="Render batch result figures from CSV tables."
    )
    parser.add_argument("results_dir", help="directory holding results.csv")
    parser.add_argument("out_dir", help="directory for the output images")
    args = parser.parse_args(argv)

    try:
        tables = load_results_dir(args.results_dir)
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 2
    except MissingColumnError as err:
        print(str(err), file=sys.stderr)
        return 2

    tables = [t for t in tables if len(t)]
    if not tables:
        print("warning: results tables contain no rows; nothing to plot", file=sys.stderr)
        return 0

    try:
        written = plot_all(tables, args.out_dir)
    except MissingColumnError as err:
        print(str(err), file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
