"""Split a pair manifest into train/val/test manifests (569/71/71 proportions by default)."""
import argparse
from pathlib import Path

from uvidnet.data import PUBLISHED_SPLIT, make_splits, write_splits
from uvidnet.keyframes import read_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("manifest", type=Path)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ratios", type=float, nargs=3, default=PUBLISHED_SPLIT)
    ap.add_argument("--assign", type=Path, help="TSV of <target path or video folder>\\t<split>")
    args = ap.parse_args()

    assignment = None
    if args.assign:
        lines = args.assign.read_text(encoding="utf-8").splitlines()
        assignment = dict(line.split("\t") for line in lines if line.strip())
    splits = make_splits(read_manifest(args.manifest), args.ratios, args.seed, assignment)
    for name, path in write_splits(args.out, splits).items():
        print(f"{name}: {len(splits[name])} pairs -> {path}  (seed {args.seed})")


if __name__ == "__main__":
    main()
