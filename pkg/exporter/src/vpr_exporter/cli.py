"""Command-line entry point for the feature exporter."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import ExportConfig, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpr-export",
        description="Export VGG-16 local features with semantic labels to SRLF files.",
    )
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--manifest", required=True, help="geotag manifest CSV")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--vgg-weights",
        default="imagenet",
        help="'imagenet', 'random', or a state-dict path (default imagenet)",
    )
    parser.add_argument(
        "--seg-weights",
        default="random",
        help="'random' or a state-dict path of a 19-class urban-scene model",
    )
    parser.add_argument("--seed", type=int, default=0, help="seed for random weights")
    parser.add_argument(
        "--resize",
        type=int,
        nargs=2,
        metavar=("WIDTH", "HEIGHT"),
        default=None,
        help="resize inputs before inference (default: native resolution)",
    )
    parser.add_argument(
        "--max-failure-fraction",
        type=float,
        default=0.01,
        help="exit nonzero when more than this fraction of images fail",
    )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    config = ExportConfig(
        image_dir=Path(args.images),
        manifest_path=Path(args.manifest),
        output_dir=Path(args.out),
        vgg_weights=args.vgg_weights,
        seg_weights=args.seg_weights,
        seed=args.seed,
        resize=tuple(args.resize) if args.resize else None,
        max_failure_fraction=args.max_failure_fraction,
    )
    result = export_features(config)
    print(f"exported {len(result.exported)}/{result.total} images -> {config.output_dir}")
    if result.total == 0:
        print("error: no images found", file=sys.stderr)
        return 1
    if len(result.failed) > config.max_failure_fraction * result.total:
        print(
            f"error: {len(result.failed)}/{result.total} images failed",
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
