"""Command-line entry point for batch feature extraction."""

from __future__ import annotations

import argparse
import sys

from .audio import UnreadableAudio
from .backbone import BackboneUnavailable
from .extract import ExtractionError, ExtractorConfig, extract_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wlbextract", description="Feature-bundle extractor")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract bundles for an indexed dataset")
    p.add_argument("--index", required=True, help="TSV: utterance_id, audio_path, transcript, "
                   "response, scene_id, listener_id, severity, split[, clean_audio_path]")
    p.add_argument("--backbone", default="toy", help="toy | small_en | medium")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-clean", action="store_true",
                   help="extract alignment attention from clean reference audio")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    config = ExtractorConfig(backbone=args.backbone, oracle_clean=args.oracle_clean)
    try:
        written = extract_dataset(args.index, args.out, config)
    except (ExtractionError, UnreadableAudio, BackboneUnavailable, OSError) as exc:
        print(f"wlbextract: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(written)} bundles to {args.out}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
