"""Batch extraction: one RMF1 file (plus metadata sidecar) per input video."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ExtractorConfig, extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="regat-extract",
        description="Extract region feature tensors (RMF1) from video files.",
    )
    parser.add_argument("videos", nargs="+", help="input video files")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--frame-rate", type=float, default=1.0,
                        help="samples per second (default 1)")
    parser.add_argument("--normalization", choices=["l2", "none"], default="l2",
                        help="per-region normalization of the concatenated "
                             "descriptor (default l2)")
    parser.add_argument("--weights", help="local backbone state-dict file")
    parser.add_argument("--input-size", type=int, default=224,
                        help="square inference resolution (default 224)")
    parser.add_argument("--seed", type=int, default=0,
                        help="backbone init seed when no weights are given")
    args = parser.parse_args(argv)

    config = ExtractorConfig(
        frame_rate=args.frame_rate,
        weights_path=args.weights,
        normalization=args.normalization,
        input_size=args.input_size,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for video in args.videos:
        target = out_dir / (Path(video).stem + ".rmf")
        try:
            regions = extract(video, target, config)
        except (OSError, ValueError) as exc:
            print(f"error: {video}: {exc}", file=sys.stderr)
            failures += 1
            continue
        print(f"{video} -> {target} ({regions.shape[0]} frames)", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
