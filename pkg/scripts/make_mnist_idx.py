"""Write the 5,000-image MNIST subset bundled with mlxtend as IDX files.

    python scripts/make_mnist_idx.py data/mnist

Produces ``train-images-idx3-ubyte.gz`` / ``train-labels-idx1-ubyte.gz``
(500 images per digit). If you have the official MNIST files, drop them in the
data directory instead; the loader reads either.
"""
import argparse
from pathlib import Path

import numpy as np

from mascl.tasks import write_idx_images, write_idx_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="data/mnist")
    args = ap.parse_args()
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte.gz", np.rint(x).astype(np.uint8).reshape(-1, 28, 28))
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", y.astype(np.uint8))
    print(f"wrote {len(y)} images to {out}")


if __name__ == "__main__":
    main()
