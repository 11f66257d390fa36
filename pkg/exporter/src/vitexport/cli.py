"""One-shot conversion script: checkpoint in, WMAN manifest + fixture out."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_MODEL, ExportManifestSpec, export
from .wman import ExportError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vitseq-export",
        description="Convert a pretrained ViT checkpoint to a WMAN v1 "
                    "encoder manifest plus a reference-feature fixture.",
    )
    parser.add_argument(
        "--source", default=DEFAULT_MODEL,
        help="hub model id or a local checkpoint directory "
             f"(default: {DEFAULT_MODEL})",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--synthetic", action="store_true",
        help="fabricate a seeded checkpoint with the real names and shapes "
             "instead of reading a source (offline conformance testing)",
    )
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for --synthetic weights")
    args = parser.parse_args(argv)

    spec = ExportManifestSpec(source=args.source, out_dir=args.out,
                              synthetic=args.synthetic, seed=args.seed)
    try:
        manifest_path, fixture_path = export(spec)
    except ExportError as exc:
        print(f"vitseq-export: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {manifest_path}")
    print(f"wrote {fixture_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
