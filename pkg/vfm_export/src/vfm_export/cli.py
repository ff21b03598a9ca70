"""Command line: export patch-feature grids for a directory of images."""
from __future__ import annotations

import argparse
import os
import sys

from .export import ExportConfig, export
from .models import ModelLoadError

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif",
              ".tiff", ".webp")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vfm-export",
        description="Export dense patch features from a frozen vision "
                    "foundation model as SRMT blobs")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the model over a directory")
    p.add_argument("--model", default="dinov2_vitb14",
                   help="model id (dinov2_vits14|vitb14|vitl14, test-tiny)")
    p.add_argument("--layer", type=int, default=-3,
                   help="transformer block to read (default: third-to-last)")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not os.path.isdir(args.in_dir):
        print(f"error: no such directory {args.in_dir}", file=sys.stderr)
        return 1
    images = sorted(
        os.path.join(args.in_dir, name) for name in os.listdir(args.in_dir)
        if name.lower().endswith(IMAGE_EXTS))
    if not images:
        print(f"error: no decodable images in {args.in_dir}", file=sys.stderr)
        return 1
    cfg = ExportConfig(model_id=args.model, layer=args.layer,
                       out_dir=args.out_dir)
    try:
        written = export(images, cfg)
    except (ModelLoadError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for image_id, shape in written:
        print(f"{image_id}: {'x'.join(str(d) for d in shape)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
