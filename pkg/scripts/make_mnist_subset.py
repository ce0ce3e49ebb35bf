"""Write MNIST IDX files for offline machines.

If the official files (train-images-idx3-ubyte, ...) can be fetched, place
them in $RANDLAB_DATA_DIR and skip this script.  Without network access, the
5,000-image MNIST subset shipped inside ``mlxtend`` (500 per digit) is split
into train/test IDX pairs in the standard file names.

    python scripts/make_mnist_subset.py --out ~/data/mnist --test 1000
"""
import argparse
from pathlib import Path

import numpy as np

from randlab.data import Dataset, split, write_mnist_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--test", type=int, default=1000, help="held-out images")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    from mlxtend.data import mnist_data

    x, y = mnist_data()
    full = Dataset((x / 255.0).reshape(-1, 1, 28, 28), y, "mnist-5k", 10)
    test, train = split(full, args.test, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mnist_idx(train, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    write_mnist_idx(test, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte")
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
