"""Command-line converter: published archives -> DPC1 container.

Exit codes: 0 success, 2 validation/usage error, 3 I/O or source-format
error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .convert import IngestError, SourceManifest, convert


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ingest",
        description="Convert ITOP / UBC3V depth-pose archives to DPC1.")
    p.add_argument("--kind", choices=["itop", "ubc3v"], required=True)
    p.add_argument("--in", dest="input_dir", required=True, metavar="DIR",
                   help="archive root directory")
    p.add_argument("--out", required=True, metavar="FILE.dpc")
    p.add_argument("--cap", type=int, help="convert at most N samples")
    p.add_argument("--views", choices=["frontal", "top", "all"], default="all",
                   help="camera views to include (ITOP only)")
    p.add_argument("--split", default="train", help="source partition (train/test/...)")
    p.add_argument("--units", choices=["auto", "m", "mm"], default="auto",
                   help="depth units in the source (auto = range heuristic)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = SourceManifest(kind=args.kind, input_dir=args.input_dir,
                                  views=args.views, split=args.split,
                                  cap=args.cap, units=args.units)
        ds = convert(manifest, args.out)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (IngestError, OSError) as e:
        print(f"source error: {e}", file=sys.stderr)
        return 3
    print(f"{args.out}: {len(ds.samples)} samples, {ds.frame_count} frames, "
          f"{ds.skeleton.joint_count} joints [{ds.split}]")
    return 0


if __name__ == "__main__":
    sys.exit(main())
