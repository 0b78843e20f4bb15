"""Convert MNIST and USPS downloads into the IDX files the digits experiment reads.

MNIST may be given as the original IDX files (optionally gzipped) or as a CSV
with the label in the first column and 784 pixel columns. USPS may be given as
the LIBSVM-format file (``usps`` or ``usps.bz2``, labels 1..10, pixels in
[-1, 1]) or as ``usps.h5`` (groups ``train``/``test`` with ``data`` and
``target``; reading it needs h5py). USPS 16x16 images are upsampled to 28x28
by nearest neighbour and all pixels are stored as uint8.

    python scripts/prepare_digits.py --mnist-images train-images-idx3-ubyte.gz \\
        --mnist-labels train-labels-idx1-ubyte.gz --usps usps.bz2
"""

import argparse
import bz2
import csv
import gzip
from pathlib import Path

import numpy as np

from clcn.data import load_idx_images, load_idx_labels, resize_nearest, write_idx_images, write_idx_labels
from clcn.experiments import DIGITS_FILES, digits_dir


def _open_text(path: Path):
    if path.suffix == ".bz2":
        return bz2.open(path, "rt")
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path)


def read_mnist_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with _open_text(path) as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip().isdigit()]  # drops a header row
    data = np.array(rows, dtype=np.float64)
    return data[:, 1:].reshape(-1, 28, 28), data[:, 0].astype(np.int64)


def read_usps_libsvm(path: Path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    with _open_text(path) as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            img = np.zeros(256)  # absent LIBSVM features are 0
            for item in fields[1:]:
                idx, value = item.split(":")
                img[int(idx) - 1] = float(value)
            images.append(img)
            labels.append(int(float(fields[0])) - 1)
    return (np.array(images) + 1.0) / 2.0, np.array(labels, dtype=np.int64)


def read_usps_h5(path: Path) -> tuple[np.ndarray, np.ndarray]:
    import h5py  # only needed for this input format

    with h5py.File(path, "r") as fh:
        parts = [(fh[g]["data"][:], fh[g]["target"][:]) for g in ("train", "test") if g in fh]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]).astype(np.int64)


def to_uint8(images: np.ndarray, side: int = 28) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        s = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(-1, s, s)
    if images.max() <= 1.0:
        images = images * 255.0
    images = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    return images if images.shape[1] == side else resize_nearest(images, side)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--mnist-images", type=Path, help="MNIST IDX image file")
    parser.add_argument("--mnist-labels", type=Path, help="MNIST IDX label file")
    parser.add_argument("--mnist-csv", type=Path, help="MNIST as label,pixel0..pixel783 CSV")
    parser.add_argument("--usps", type=Path, required=True, help="USPS as LIBSVM text (.bz2 ok) or .h5")
    parser.add_argument("--out", type=Path, default=digits_dir())
    args = parser.parse_args()

    if args.mnist_csv:
        mnist_x, mnist_y = read_mnist_csv(args.mnist_csv)
        mnist_x = to_uint8(mnist_x)
    elif args.mnist_images and args.mnist_labels:
        mnist_x = to_uint8(load_idx_images(args.mnist_images))
        mnist_y = load_idx_labels(args.mnist_labels)
    else:
        parser.error("give --mnist-csv or both --mnist-images and --mnist-labels")
    reader = read_usps_h5 if args.usps.suffix in (".h5", ".hdf5") else read_usps_libsvm
    usps_x, usps_y = reader(args.usps)
    usps_x = to_uint8(usps_x)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_images(args.out / DIGITS_FILES["source_images"], mnist_x)
    write_idx_labels(args.out / DIGITS_FILES["source_labels"], mnist_y)
    write_idx_images(args.out / DIGITS_FILES["target_images"], usps_x)
    write_idx_labels(args.out / DIGITS_FILES["target_labels"], usps_y)
    print(f"wrote {len(mnist_y)} MNIST and {len(usps_y)} USPS images to {args.out}")


if __name__ == "__main__":
    main()
