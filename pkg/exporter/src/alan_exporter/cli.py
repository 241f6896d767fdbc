"""Command-line entry point mirroring ExportConfig."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from alan_exporter.export import ExportConfig, export


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("ALAN_LOG", "INFO").upper(),
                      logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = argparse.ArgumentParser(
        prog="alan-export",
        description="Run a frozen ViT backbone over echocardiogram frames "
                    "and write ALANFEAT tensors plus a manifest fragment.",
    )
    parser.add_argument("--input", required=True,
                        help="directory of sequence subdirectories (or one "
                             "flat directory of frames)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--model", default="random:0",
                        help="ViT-S state-dict path or random:<seed> "
                             "(default random:0)")
    parser.add_argument("--image-size", type=int, default=112,
                        help="model input size, e.g. 112 or 224 (default 112)")
    parser.add_argument("--patch-size", type=int, default=4,
                        help="ViT patch size, e.g. 4 or 8 (default 4)")
    parser.add_argument("--stats", default="compute",
                        help="'compute' to fit standardization stats on this "
                             "input set, or a stats YAML to reuse "
                             "(default compute)")
    parser.add_argument("--split-tag", default="train",
                        help="split tag written to the manifest "
                             "(default train)")
    parser.add_argument("--labels",
                        help="optional YAML mapping seq_id -> view label")
    parser.add_argument("--masks",
                        help="optional directory of annotation images to "
                             "convert (masks/<seq_id>/f<idx>_<REGION>.pgm)")
    parser.add_argument("--batch-size", type=int, default=8,
                        help="frames per forward pass (default 8)")
    args = parser.parse_args(argv)
    try:
        cfg = ExportConfig(
            input_dir=Path(args.input),
            out_dir=Path(args.out),
            model=args.model,
            image_size=args.image_size,
            patch_size=args.patch_size,
            stats=args.stats,
            split_tag=args.split_tag,
            labels_file=Path(args.labels) if args.labels else None,
            masks_dir=Path(args.masks) if args.masks else None,
            batch_size=args.batch_size,
        )
        manifest = export(cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"manifest fragment: {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
