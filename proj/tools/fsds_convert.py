#!/usr/bin/env python3
"""Convert image arrays to the FSDS files that lffs reads, or print an FSDS header.

Real few-shot benchmarks plug in here: decode CIFAR-FS or similar into an
.npz with `images` (N x H x W x C, uint8 0..255 or float 0..1) and `labels`
(N ints), one file per split, then

    fsds_convert.py pack base.npz base.fsds --split base
    fsds_convert.py pack novel.npz novel.fsds --split novel

and point data.base_path / data.novel_path at the results. Labels are
remapped to 0..k-1 in sorted order. Downloading and decoding the benchmark
itself is not handled here.
"""

import argparse
import struct
import sys

import numpy as np

MAGIC = b"FSDS"
VERSION = 1
SPLITS = {"base": 0, "novel": 1, "features": 2}
HEADER = struct.Struct("<4sIIIIIIB")


def pack(src, dst, split):
    data = np.load(src)
    images = np.asarray(data["images"])
    labels = np.asarray(data["labels"]).reshape(-1)
    if images.ndim != 4:
        sys.exit(f"{src}: images must be N x H x W x C, got shape {images.shape}")
    if len(labels) != len(images):
        sys.exit(f"{src}: {len(images)} images but {len(labels)} labels")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    images = images.astype("<f4")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        sys.exit(f"{src}: pixel values must lie in [0, 1]")

    classes, remapped = np.unique(labels, return_inverse=True)
    if len(classes) > 0xFFFF:
        sys.exit(f"{src}: {len(classes)} classes do not fit a u16 label")
    n, h, w, c = images.shape
    with open(dst, "wb") as out:
        out.write(HEADER.pack(MAGIC, VERSION, n, c, h, w, len(classes), SPLITS[split]))
        out.write(remapped.astype("<u2").tobytes())
        out.write(np.ascontiguousarray(images.transpose(0, 3, 1, 2)).tobytes())  # NCHW
    print(f"{dst}: {n} images {c}x{h}x{w}, {len(classes)} classes, split {split}")


def show(path):
    with open(path, "rb") as f:
        raw = f.read(HEADER.size)
    if len(raw) < HEADER.size:
        sys.exit(f"{path}: truncated header")
    magic, version, n, c, h, w, k, split = HEADER.unpack(raw)
    if magic != MAGIC:
        sys.exit(f"{path}: bad magic {magic!r}")
    names = {v: s for s, v in SPLITS.items()}
    print(f"version {version}, {n} images {c}x{h}x{w}, {k} classes, split {names.get(split, split)}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("pack", help="write an .npz as FSDS")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--split", choices=["base", "novel"], required=True)
    s = sub.add_parser("show", help="print an FSDS header")
    s.add_argument("path")
    args = parser.parse_args()
    if args.cmd == "pack":
        pack(args.src, args.dst, args.split)
    else:
        show(args.path)


if __name__ == "__main__":
    main()
