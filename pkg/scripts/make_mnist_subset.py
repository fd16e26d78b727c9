"""Write the 5000-digit MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: python scripts/make_mnist_subset.py [OUT_DIR]   (default: data/mnist5k)

The acceptance tests read this subset from data/mnist5k.
"""
import gzip
import io
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from vdl.data import write_idx_images, write_idx_labels


def main(out_dir: str = "data/mnist5k") -> None:
    raw = resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz").read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "images-idx3-ubyte.gz", images)
    write_idx_labels(out / "labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
