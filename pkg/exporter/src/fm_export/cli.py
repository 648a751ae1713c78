"""fm-export: dump foundation-model features into an FMTC store."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbones import REGISTRY, VL_BACKBONES, BackboneError
from .export import ExportJob, export


def build_parser():
    parser = argparse.ArgumentParser(prog="fm-export", description=__doc__)
    parser.add_argument("--source", required=True,
                        help="directory with images/ and masks/<class>/ subdirectories")
    parser.add_argument("--out", required=True, help="output store directory")
    parser.add_argument("--backbone", required=True, choices=sorted(REGISTRY),
                        help="vision backbone (ViT-B variant)")
    parser.add_argument("--vl-backbone", choices=sorted(VL_BACKBONES),
                        help="optional vision-language backbone for dense VL features and text embeddings")
    parser.add_argument("--input-side", type=int,
                        help="square input resolution (default 30 * patch size -> 30x30 grid)")
    parser.add_argument("--weights", choices=("pretrained", "random"), default="pretrained",
                        help="'random' builds seeded random weights (offline, deterministic)")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(
        source_dir=args.source,
        out_dir=args.out,
        backbone_id=args.backbone,
        vl_backbone_id=args.vl_backbone,
        input_side=args.input_side,
        weights=args.weights,
        seed=args.seed,
    )
    try:
        manifest = export(job)
    except BackboneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
