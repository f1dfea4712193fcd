#!/usr/bin/env python3
"""Convert the per-class JSON dump shipped by the `fashion-mnist` npm package
into IDX files (train/t10k images + labels).

Usage: fashion_json_to_idx.py <clothes_dir> <out_dir> [--test N] [--seed S]
"""
import argparse
import json
import os
import random
import struct


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("clothes_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records = []
    for label in range(10):
        with open(os.path.join(args.clothes_dir, f"{label}.json")) as f:
            for row in json.load(f)["data"]:
                # the dump carries a couple of empty rows
                if len(row) != 784:
                    continue
                records.append(([min(255, max(0, int(v))) for v in row], label))
    random.Random(args.seed).shuffle(records)
    test, train = records[: args.test], records[args.test :]
    os.makedirs(args.out_dir, exist_ok=True)
    for prefix, part in (("train", train), ("t10k", test)):
        write_images(os.path.join(args.out_dir, f"{prefix}-images-idx3-ubyte"), [r for r, _ in part])
        write_labels(os.path.join(args.out_dir, f"{prefix}-labels-idx1-ubyte"), [l for _, l in part])
    print(f"train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
