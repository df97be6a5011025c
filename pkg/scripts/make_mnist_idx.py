"""Build gzip IDX files from the 5000-digit MNIST subset shipped with mlxtend.

The subset is a CSV of 784 pixel columns followed by the label, 500 images
per digit. Each digit's first 400 rows go to train and the last 100 to test.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_idx.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
from __future__ import annotations

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from create_cil.datasets import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_subset(source: Path) -> tuple[np.ndarray, np.ndarray]:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as zf:
            raw = zf.read(MEMBER)
    else:
        raw = source.read_bytes()
    table = np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",")
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", type=Path, help="mlxtend wheel or mnist_5k.csv.gz")
    parser.add_argument("out", type=Path)
    parser.add_argument("--train-per-class", type=int, default=400)
    args = parser.parse_args(argv)

    images, labels = read_subset(args.source)
    train_rows, test_rows = [], []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        train_rows.append(rows[: args.train_per_class])
        test_rows.append(rows[args.train_per_class :])
    train = np.sort(np.concatenate(train_rows))
    test = np.sort(np.concatenate(test_rows))

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", args.out / "train-labels-idx1-ubyte.gz",
              images[train], labels[train], compress=True)
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", args.out / "t10k-labels-idx1-ubyte.gz",
              images[test], labels[test], compress=True)
    print(f"train {len(train)} test {len(test)} -> {args.out}")


if __name__ == "__main__":
    main()
