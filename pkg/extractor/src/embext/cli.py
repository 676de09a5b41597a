"""``embext extract``: texts JSONL in, engine-format embedding file out.

Exit codes: 0 success, 1 validation/config error, 2 I/O or model-load error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from embext.extractor import ExtractorConfig, extract


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="embext", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="embed an id+text JSONL file")
    p.add_argument("--model", required=True, help="model path or hub id")
    p.add_argument("--adapter", help="low-rank adapter .npz (query side only)")
    p.add_argument("--side", required=True, choices=["query", "context"])
    p.add_argument("--in", dest="in_path", required=True, help="texts JSONL")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--format", default="bin", choices=["bin", "jsonl"])
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=128)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(
            model=args.model,
            side=args.side,
            adapter=args.adapter,
            batch_size=args.batch_size,
            max_seq_len=args.max_len,
            format=args.format,
        )
        result = extract(config, args.in_path, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, EnvironmentError) as exc:
        print(f"i/o or model-load error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {result.count} embeddings (dim {result.dim}, provider {result.provider}) "
        f"to {args.out}" + (f"; {result.truncated} truncated" if result.truncated else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
