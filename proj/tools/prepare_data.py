#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Builds the small datasets under data/ used by the tests and examples.

MNIST: the 5,000-digit subset bundled with the mlxtend wheel, split 4,500/500
(stratified, fixed seed) and written as gzip-compressed IDX files.
Images: public-domain photographs shipped with scikit-image, written as P6 PPM.
"""
import argparse
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def fetch_mnist5k():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0",
                        "--no-deps", "-d", tmp, "-q"], check=True)
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def write_idx(path, array):
    code = 0x08
    header = struct.pack(">HBB", 0, code, array.ndim)
    header += b"".join(struct.pack(">I", n) for n in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.tobytes())


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = pathlib.Path(args.out)

    images, labels = fetch_mnist5k()
    rng = np.random.default_rng(20230511)
    test_idx = []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        test_idx.extend(rng.choice(idx, size=50, replace=False))
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test_idx] = True
    train_order = rng.permutation(np.flatnonzero(~test_mask))
    test_order = rng.permutation(np.flatnonzero(test_mask))

    mnist = out / "mnist5k"
    mnist.mkdir(parents=True, exist_ok=True)
    write_idx(mnist / "train-images-idx3-ubyte.gz", images[train_order])
    write_idx(mnist / "train-labels-idx1-ubyte.gz", labels[train_order])
    write_idx(mnist / "t10k-images-idx3-ubyte.gz", images[test_order])
    write_idx(mnist / "t10k-labels-idx1-ubyte.gz", labels[test_order])

    from skimage import data as skdata
    from skimage.transform import resize

    photos = out / "images"
    photos.mkdir(parents=True, exist_ok=True)
    coffee = resize(skdata.coffee().astype(np.float64), (512, 768), preserve_range=True,
                    anti_aliasing=True)
    write_ppm(photos / "coffee_512x768.ppm", np.clip(np.rint(coffee), 0, 255))
    for name in ("astronaut", "chelsea", "rocket"):
        write_ppm(photos / f"train_{name}.ppm", getattr(skdata, name)()[..., :3])


if __name__ == "__main__":
    main()
