#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into IDX files.

The package ships 10,000 MNIST digits as JSON arrays of byte/255 values rounded
to three decimals; round(v * 255) recovers every original byte exactly. The
digits are shuffled with a fixed seed and split 8,000 train / 2,000 test.

    npm pack mnist && tar xzf mnist-*.tgz
    tools/import_mnist_npm.py package/src/digits data/mnist
"""
import argparse
import json
import pathlib
import random
import struct


def write_idx(out_dir, prefix, images, labels):
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        values = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        if len(values) % 784:
            raise SystemExit(f"{digit}.json: {len(values)} values is not a multiple of 784")
        for k in range(len(values) // 784):
            pixels = [round(v * 255) for v in values[784 * k: 784 * (k + 1)]]
            if any(abs(p / 255 - v) > 5e-4 for p, v in zip(pixels, values[784 * k: 784 * (k + 1)])):
                raise SystemExit(f"{digit}.json: value not on the byte/255 lattice")
            samples.append((pixels, digit))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[: args.test], samples[args.test:]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir, "train", [s[0] for s in train], [s[1] for s in train])
    write_idx(args.out_dir, "t10k", [s[0] for s in test], [s[1] for s in test])
    print(f"wrote {len(train)} train and {len(test)} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
