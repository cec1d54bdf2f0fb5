"""Optional long-running job: train the calibrated UVid-Net on the ManipalUAVid data.

Expects one folder of extracted frames per video under --frames-root and a
matching folder of color label PNGs (named like the frames) under
--labels-root. Only keyframes whose label file exists are kept. There is no
acceptance threshold; the test-split mIoU is printed next to the published
0.79 for reference.
"""
import argparse
import sys
from pathlib import Path

from uvidnet import keyframes as kf
from uvidnet.data import DEFAULT_PALETTE, load_records, make_splits, write_splits
from uvidnet.metrics import miou, report
from uvidnet.model import ArchConfig, build_uvidnet
from uvidnet.train import Samples, TrainConfig, evaluate, train

PUBLISHED_MIOU = 0.79


def collect(frames_root: Path, labels_root: Path, threshold: float):
    records = []
    for video in sorted(p for p in frames_root.iterdir() if p.is_dir()):
        seq = kf.FrameSequence.from_dir(video)
        pairs = kf.make_pairs(kf.detect_shots(seq, threshold))
        for r in kf.pair_records(seq, pairs, labels_root / video.name):
            if Path(r.label).exists():
                records.append(r)
    return records


def samples(records, size):
    a, b, y = load_records(records, size)
    return Samples(a, b, y)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--frames-root", type=Path, required=True)
    ap.add_argument("--labels-root", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("runs/full"))
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--threshold", type=float, default=kf.DEFAULT_THRESHOLD)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not args.frames_root.is_dir() or not args.labels_root.is_dir():
        sys.exit("dataset not found: pass the extracted frame and label folders")
    records = collect(args.frames_root, args.labels_root, args.threshold)
    if not records:
        sys.exit("no labeled keyframes found")
    splits = make_splits(records, seed=args.seed)
    write_splits(args.out, splits)
    size = (args.size, args.size)
    data, val, test = (samples(splits[k].records, size) for k in ("train", "val", "test"))
    print(f"pairs: train {len(data)}  val {len(val)}  test {len(test)}")

    model = build_uvidnet(ArchConfig(height=args.size, width=args.size), seed=args.seed)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                      log_path=str(args.out / "train_log.csv"), checkpoint_dir=str(args.out))
    train(model, data, cfg, val)
    cm = evaluate(model, test, args.batch_size)
    text, _ = report({"test": cm}, DEFAULT_PALETTE)
    print(text)
    print(f"test mIoU {miou(cm):.4f}  (published {PUBLISHED_MIOU})")


if __name__ == "__main__":
    main()
