#!/usr/bin/env python3
"""Write a 10k-digit MNIST subset as IDX files.

Source: the digit JSON files shipped in the npm `mnist` package
(`npm pack mnist`, then extract `package/src/digits/{0..9}.json`).
Pixel values in those files are intensities/255 rounded to three
decimals, so `round(v * 255)` recovers the original byte.

Usage: mnist_subset_from_npm.py <digits-dir> <out-dir>
"""
import json
import struct
import sys
from pathlib import Path


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = bytearray(), bytearray()
    per_class = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        count = len(flat) // 784
        per_class.append((digit, count))
        images.extend(max(0, min(255, round(v * 255))) for v in flat)
        labels.extend([digit] * count)
    n = len(labels)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)
    print(f"wrote {n} samples: {per_class}")


if __name__ == "__main__":
    main()
