"""Build the bundled 5000-image MNIST subset as IDX files.

The source is the ``mnist_5k.csv.gz`` file shipped inside the ``mlxtend``
wheel (500 images per digit, 784 pixel columns followed by the label). The
images are split per class into 400 train / 100 test with a fixed seed.

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist5k
"""
import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from dbfat.data import write_idx_images, write_idx_labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", help="mnist_5k.csv.gz from the mlxtend wheel")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    raw = Path(args.csv).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.extend(idx[: args.test_per_class])
        train.extend(idx[args.test_per_class :])
    train = rng.permutation(train)
    test = rng.permutation(test)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out / "train-images-idx3-ubyte.gz", images[train])
    write_idx_labels(args.out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx_images(args.out / "t10k-images-idx3-ubyte.gz", images[test])
    write_idx_labels(args.out / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


if __name__ == "__main__":
    main()
