#!/usr/bin/env python3
"""Write a stratified MNIST subset as gzipped IDX files.

Source is the 5000-image MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns then the label).
Output: <out>/{train,t10k}-{images,labels}-idx{3,1}-ubyte.gz, 400 train and
100 test images per class by default.

    pip download mlxtend==0.24.0 --no-deps -d /tmp/pd
    python3 tools/make_mnist_subset.py /tmp/pd/mlxtend-0.24.0-py3-none-any.whl data/mnist5k
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    # mtime=0 keeps the output byte-stable across runs
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as z:
        raw = gzip.decompress(z.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    x, y = table[:, :-1].reshape(-1, 28, 28), table[:, -1]

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.extend(idx[: args.test_per_class])
        train_idx.extend(idx[args.test_per_class:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", x[train_idx], 0x803)
    write_idx(out / "train-labels-idx1-ubyte.gz", y[train_idx], 0x801)
    write_idx(out / "t10k-images-idx3-ubyte.gz", x[test_idx], 0x803)
    write_idx(out / "t10k-labels-idx1-ubyte.gz", y[test_idx], 0x801)
    print(f"{out}: {len(train_idx)} train, {len(test_idx)} test")


if __name__ == "__main__":
    main()
