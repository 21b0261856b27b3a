"""Command-line front end for the exporter."""

from __future__ import annotations

import argparse
import sys

from .embedders import ModelError
from .export import DatasetError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ekpc-export",
        description="export image-folder datasets to EKFT token files")
    parser.add_argument("--dataset", required=True,
                        help="directory of class subdirectories")
    parser.add_argument("--out", required=True, help="output .ekft path")
    parser.add_argument("--model", default="patch-proj-v1",
                        help="'patch-proj-v1' or 'torchvision:<vit model>'")
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--d-t", type=int, default=4, help="token count incl. CLS")
    parser.add_argument("--d", type=int, default=32, help="token width")
    parser.add_argument("--max-per-class", type=int, default=0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stage", type=int, default=0,
                        help="export tokens after this many encoder blocks (ViT only)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(dataset=args.dataset, output=args.out, model=args.model,
                    image_size=args.image_size, d_t=args.d_t, d=args.d,
                    max_per_class=args.max_per_class, seed=args.seed,
                    stage=args.stage)
    try:
        sidecar = export(job)
    except (DatasetError, ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {sidecar['samples']} samples, {len(sidecar['classes'])} classes, "
          f"{sidecar['skipped']} skipped -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
