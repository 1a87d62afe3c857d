"""Thin command-line wrapper: one JSON spec file in, an export run out."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ExporterError
from .export import ExportSpec, export_features


def spec_from_file(path: str) -> ExportSpec:
    doc = json.loads(Path(path).read_text())
    doc["mean"] = tuple(doc["mean"])
    doc["std"] = tuple(doc["std"])
    return ExportSpec(**doc)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fmap-export",
        description="Export frozen-backbone patch features to .fmap files",
    )
    parser.add_argument("--spec", required=True, help="path to the JSON export spec")
    args = parser.parse_args(argv)
    try:
        manifest = export_features(spec_from_file(args.spec))
    except ExporterError as exc:
        print(f"fmap-export: error: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {len(manifest['files'])} tiles, "
        f"{len(manifest['failures'])} failures"
    )
    return 0 if not manifest["failures"] else 2


if __name__ == "__main__":
    sys.exit(main())
