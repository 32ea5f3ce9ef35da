"""Convert the digit JSON files of the npm `mnist` package into IDX files.

The package ships the first 10000 MNIST training images grouped by digit,
one JSON file per digit with pixel intensities stored as floats in [0, 1]
rounded to three decimals. Multiplying by 255 and rounding recovers the
original bytes exactly. Images are written grouped by digit (0..9), which
is the order the package stores them in.

Usage: python3 scripts/build_mnist_idx.py <package>/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        px = np.rint(np.asarray(raw, dtype=np.float64) * 255.0)
        if px.size % 784 or px.min() < 0 or px.max() > 255:
            raise ValueError(f"unexpected pixel payload for digit {digit}")
        px = px.astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, len(labels)))
        fh.write(labels.tobytes())
    print(f"wrote {len(images)} images", np.bincount(labels).tolist())


if __name__ == "__main__":
    main(*sys.argv[1:3])
