#!/usr/bin/env python3
"""Write the 5000-example MNIST subset bundled with mlxtend as IDX files.

    pip download --no-deps -d /tmp/pk mlxtend
    python3 tools/make_mnist_subset.py /tmp/pk/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().splitlines()
    labels, pixels = [], []
    for line in rows:
        vals = [int(float(v)) for v in line.split(",")]
        labels.append(vals[-1])
        pixels.append(vals[:-1])
    assert all(len(p) == 784 for p in pixels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        for p in pixels:
            f.write(bytes(p))
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(bytes(labels))
    print(f"wrote {n} examples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
