#!/usr/bin/env python3
"""Convert the per-digit JSON files shipped in the `mnist` npm package into
IDX files (500 train / 200 test images per class by default).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist
"""
import argparse
import json
import random
import struct
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=500)
    ap.add_argument("--test-per-class", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for digit in range(10):
        flat = json.load(open(Path(args.digits_dir) / f"{digit}.json"))["data"]
        images = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        rng.shuffle(images)
        need = args.train_per_class + args.test_per_class
        if len(images) < need:
            raise SystemExit(f"digit {digit}: only {len(images)} images, need {need}")
        pixels = [[round(v * 255) for v in img] for img in images[:need]]
        train += [(digit, p) for p in pixels[: args.train_per_class]]
        test += [(digit, p) for p in pixels[args.train_per_class:]]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        rng.shuffle(rows)
        labels = [d for d, _ in rows]
        payload = [v for _, p in rows for v in p]
        write_idx(out / f"{name}-images-idx3-ubyte", 0x803, (len(rows), 28, 28), payload)
        write_idx(out / f"{name}-labels-idx1-ubyte", 0x801, (len(rows),), labels)
        print(name, len(rows))


if __name__ == "__main__":
    main()
