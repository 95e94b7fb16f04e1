"""Command-line entry point; flags mirror the export request fields."""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .errors import DatasetError, SpecError
from .export import DEFAULT_TEMPLATE, ExportSpec, export_pair


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export a class-per-subdirectory image dataset to a "
                    "visual/textual EBNK bank pair.")
    parser.add_argument("--version", action="version",
                        version=f"embed-export {__version__}")
    parser.add_argument("--root", required=True,
                        help="dataset root holding one subdirectory per class")
    parser.add_argument("--out", required=True, help="output path prefix")
    parser.add_argument("--template", default=DEFAULT_TEMPLATE,
                        help="class-name prompt with exactly one {} placeholder")
    parser.add_argument("--encoder", default="local:64",
                        help="local:<dim> (offline, deterministic) or clip:<model-id>")
    parser.add_argument("--batch", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(root=args.root, out_prefix=args.out, template=args.template,
                      encoder=args.encoder, batch=args.batch)
    try:
        manifest = export_pair(spec)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    json.dump(manifest, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
