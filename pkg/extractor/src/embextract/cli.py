"""Command line for the feature extractor."""

from __future__ import annotations

import argparse
import json
import sys

from .extract import ExtractionError, ExtractionJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embextract",
        description="Dump penultimate-layer features (and optionally logits) "
        "from a vision classifier into the EMB1 embedding format.",
    )
    parser.add_argument("--model", required=True,
                        help="torchvision model name (e.g. resnet18) or 'tinynet'")
    parser.add_argument("--weights", default="none",
                        help="'none' for seeded random init, or a torchvision weights name")
    parser.add_argument("--data", required=True,
                        help="image-folder path or builtin 'synth:<n>'")
    parser.add_argument("--split", default="", help="dataset split subdirectory")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    parser.add_argument("--include-labels", action="store_true")
    parser.add_argument("--with-logits", action="store_true",
                        help="also write the <out>.logits.emb companion")
    parser.add_argument("--init-seed", dest="init_seed", type=int, default=0,
                        help="seed for random weight initialization")
    parser.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExtractionJob(
        model=args.model,
        data=args.data,
        out=args.out,
        weights=args.weights,
        split=args.split,
        batch_size=args.batch_size,
        include_labels=args.include_labels,
        with_logits=args.with_logits,
        init_seed=args.init_seed,
    )
    try:
        summary = extract(job)
    except (ExtractionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
