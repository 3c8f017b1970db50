"""Build the gzipped IDX MNIST fixture from the 5000-digit CSV bundled with mlxtend.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist_fixture.py /tmp/mlx/mlxtend-*.whl data/mnist5k

Accepts the wheel itself or an extracted ``mnist_5k.csv.gz``. Output is
byte-reproducible (gzip mtime is fixed).
"""
from __future__ import annotations

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from selfens.datagen import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path) -> np.ndarray:
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as zf:
            blob = zf.read(MEMBER)
    else:
        blob = src.read_bytes()
    text = gzip.decompress(blob).decode("ascii")
    return np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args(argv)
    rows = read_rows(args.source)
    images = rows[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = rows[:, -1].astype(np.uint8)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels, args.out_dir / "images-idx3-ubyte.gz",
              args.out_dir / "labels-idx1-ubyte.gz")
    print(f"{len(labels)} images, class counts {np.bincount(labels, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
