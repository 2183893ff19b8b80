"""Command line: rbmplots <kind> --in DIR --out FILE.png, plus 'validate'."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .figures import KINDS, FigureSpec, RenderError, render
from .results import validate

EXIT_OK = 0
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbmplots",
        description="render figures from an rbmlab result directory",
    )
    parser.add_argument("kind", help=f"one of: {', '.join(KINDS)}, or 'validate'")
    parser.add_argument("--in", dest="in_dir", required=True,
                        help="directory holding result.csv and manifest.json")
    parser.add_argument("--out", default=None, help="output image path (.png)")
    parser.add_argument("--dpi", type=int, default=150)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.kind == "validate":
        report = validate(args.in_dir)
        print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.kind not in KINDS:
        print(
            f"error: unknown kind {args.kind!r}; valid kinds: {', '.join(KINDS)}, validate",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if args.out is None:
        print("error: --out FILE.png is required for figure kinds", file=sys.stderr)
        return EXIT_USAGE
    spec = FigureSpec(Path(args.in_dir), args.kind, Path(args.out), {"dpi": args.dpi})
    try:
        render(spec)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {args.out} and {Path(args.out).with_suffix('.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
