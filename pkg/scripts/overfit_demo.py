"""Overfit a toy UVid-Net on two synthetic pairs and print the accuracy curve."""
import argparse
import time

from uvidnet.metrics import pixel_accuracy
from uvidnet.model import ArchConfig, build_uvidnet
from uvidnet.synthetic import toy_samples
from uvidnet.train import Adam, evaluate, train_step


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--merge", default="multiplication")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ArchConfig(base_width=args.base_width, height=args.size, width=args.size, merge=args.merge)
    model = build_uvidnet(cfg, seed=args.seed)
    data = toy_samples(2, args.size, seed=args.seed)
    opt = Adam(model.parameters(), lr=args.lr)
    start = time.time()
    for step in range(1, args.steps + 1):
        loss = train_step(model, opt, data)
        if step == 1 or step % 25 == 0:
            acc = pixel_accuracy(evaluate(model, data))
            print(f"step {step:4d}  loss {loss:.5f}  train pixel accuracy {acc:.4f}  ({time.time() - start:.1f}s)")


if __name__ == "__main__":
    main()
