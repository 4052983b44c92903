#!/usr/bin/env python3
"""Build a small MNIST sample in IDX format from the `mnist` npm package.

The package bundles 10,000 MNIST digits as JSON arrays of 28x28 floats in
[0, 1]. This script interleaves the digits class by class, quantizes them
back to bytes and writes gzipped IDX files:

    data/mnist/t10k-images-idx3-ubyte.gz
    data/mnist/t10k-labels-idx1-ubyte.gz

Usage: scripts/fetch_mnist.py [output_dir]
"""
import gzip
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

SIDE = 28


def main() -> None:
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(
        os.path.dirname(os.path.abspath(__file__)), "..", "data", "mnist")
    os.makedirs(out_dir, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        per_class = []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as fh:
                data = json.load(fh)["data"]
            n = len(data) // (SIDE * SIDE)
            per_class.append([data[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(n)])

    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i < len(samples):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in samples[i]))
                labels.append(digit)

    count = len(labels)
    with gzip.GzipFile(os.path.join(out_dir, "t10k-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, count, SIDE, SIDE))
        for img in images:
            fh.write(img)
    with gzip.GzipFile(os.path.join(out_dir, "t10k-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, count))
        fh.write(bytes(labels))
    print(f"wrote {count} examples to {out_dir}")


if __name__ == "__main__":
    main()
