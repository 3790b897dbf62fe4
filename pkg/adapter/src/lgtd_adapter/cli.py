"""CLI: `lgtd-adapter dump` writes LGTD files, `lgtd-adapter token-map`
exports the token text -> model id JSON map.

The dump input is a matrix file (.npy, or whitespace-separated text with one
step per row) or `-` for text on stdin.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .adapter import token_map_export, token_map_to_json, write_dump


def load_matrix(source: str) -> np.ndarray:
    if source == "-":
        matrix = np.loadtxt(sys.stdin, dtype=np.float64, ndmin=2)
    elif source.endswith(".npy"):
        matrix = np.load(source)
    else:
        matrix = np.loadtxt(source, dtype=np.float64, ndmin=2)
    return np.atleast_2d(matrix)


def cmd_dump(args) -> int:
    matrix = load_matrix(args.input)
    if args.vocab_size is not None and matrix.shape[1] != args.vocab_size:
        print(
            f"error: matrix width {matrix.shape[1]} != --vocab-size {args.vocab_size}",
            file=sys.stderr,
        )
        return 2
    write_dump(matrix, args.out)
    print(f"wrote {matrix.shape[0]} steps x {matrix.shape[1]} vocab to {args.out}")
    return 0


def cmd_token_map(args) -> int:
    mapping = token_map_export(
        loc_start=args.loc_start,
        seg_start=args.seg_start,
        n_loc=args.n_loc,
        n_seg=args.n_seg,
    )
    with open(args.out, "w") as f:
        f.write(token_map_to_json(mapping))
    print(f"wrote {len(mapping)} token mappings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgtd-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump", help="write a logit matrix as an LGTD file")
    p.add_argument("input", help="matrix file (.npy or text) or '-' for stdin")
    p.add_argument("--vocab-size", type=int, default=None,
                   help="expected vocabulary size (validates the matrix width)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("token-map", help="export token text -> model id JSON")
    p.add_argument("--loc-start", type=int, required=True,
                   help="model id of <loc0000>")
    p.add_argument("--seg-start", type=int, required=True,
                   help="model id of <seg000>")
    p.add_argument("--n-loc", type=int, default=1024)
    p.add_argument("--n-seg", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_token_map)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
