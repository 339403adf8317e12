"""plotkit CLI: render attainment and blocking figures from run artifacts."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .figures import plot_attainment_curve, plot_blocking_bars


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotkit", description="Render figures from sweep CSVs and run summaries"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_att = sub.add_parser("attainment", help="attainment-vs-sweep curves with goodput lines")
    p_att.add_argument("csvs", nargs="+", help="sweep CSV files (same sweep_var)")
    p_att.add_argument("--target", type=float, default=0.9)
    p_att.add_argument("--out", required=True, help="output image (e.g. fig.svg)")

    p_blk = sub.add_parser("blocking", help="mean blocking-time bars per granularity")
    p_blk.add_argument("jsons", nargs="+", help="run summary JSON files")
    p_blk.add_argument("--out", required=True)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "attainment":
            meta = plot_attainment_curve(args.csvs, args.target, args.out)
            for label, info in meta["series"].items():
                print(f"{label}: goodput marker at {info['goodput']}")
        else:
            meta = plot_blocking_bars(args.jsons, args.out)
            for label, mean_ms in meta["bars"].items():
                print(f"{label}: mean blocking {mean_ms:.3f} ms")
        print(f"wrote {meta['out']}")
        return 0
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
