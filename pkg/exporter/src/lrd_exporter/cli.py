"""Command line entry point: lrd-export."""

from __future__ import annotations

import argparse
import logging
import sys

from .backbones import ModelLoadError
from .dump import DumpWriteError
from .export import ExportError, ExportSpec, export_readouts, parse_layers, read_pairs_tsv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrd-export",
        description="Capture per-layer text/vision readouts from a backbone "
                    "checkpoint and write them as a layer dump.")
    parser.add_argument("--model", required=True,
                        help="path to a saved backbone checkpoint")
    parser.add_argument("--layers", required=True,
                        help="block indices to capture: 'a..b' (inclusive) or 'i,j,k'")
    parser.add_argument("--readout", choices=("eos", "mean"), default="mean",
                        help="sequence-to-vector readout (default: mean)")
    parser.add_argument("--mean-over", choices=("valid", "all"), default="valid",
                        help="mean readout over valid tokens only, or all positions")
    parser.add_argument("--pairs", required=True,
                        help="TSV file: pair_id<TAB>text<TAB>image_path")
    parser.add_argument("--out", required=True, help="output dump path (.lrd)")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("lrd_exporter")
    try:
        layers = parse_layers(args.layers)
        pairs = read_pairs_tsv(args.pairs)
        spec = ExportSpec(model=args.model, layers=layers, pairs=pairs,
                          out=args.out, readout=args.readout,
                          mean_over=args.mean_over, batch_size=args.batch_size)
    except (ExportError, OSError) as exc:
        log.error("%s", exc)
        return 2
    try:
        payload, manifest = export_readouts(spec)
    except (ExportError, ModelLoadError, DumpWriteError) as exc:
        log.error("%s", exc)
        return 3
    log.info("wrote %s and %s", payload, manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
