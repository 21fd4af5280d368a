#!/usr/bin/env python3
"""Builds the desk corpus: 1,000 grayscale 28x28 digits as an IDX u8 file.

Source images are scikit-learn's bundled 8x8 handwritten digits (16 gray
levels). Each is upsampled bilinearly to 20x20 and centred on a 28x28 canvas,
the same framing MNIST uses.
"""
import argparse
import struct

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits


def build(count: int) -> np.ndarray:
    digits = load_digits().images[:count]
    out = np.zeros((count, 28, 28), dtype=np.uint8)
    for i, img in enumerate(digits):
        small = Image.fromarray((img * (255.0 / 16.0)).round().astype(np.uint8))
        big = np.asarray(small.resize((20, 20), Image.BILINEAR))
        out[i, 4:24, 4:24] = big
    return out


def write_idx(path: str, images: np.ndarray) -> None:
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.tobytes())


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--count", type=int, default=1000)
    parser.add_argument("--out", default="tests/data/digits1000-images.idx3-ubyte")
    args = parser.parse_args()
    write_idx(args.out, build(args.count))


if __name__ == "__main__":
    main()
