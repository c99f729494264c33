"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The package (MIT, github.com/cazala/mnist) carries 10,000 MNIST digits as
per-class arrays of 784 grayscale values rounded to three decimals. Each
class is split 80/20 in file order into train and test pools.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from decov.datasets import write_idx_array


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-fraction", type=float, default=0.8)
    args = ap.parse_args()

    splits = {"train": ([], []), "test": ([], [])}
    for c in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{c}.json").read_text())["data"])
        imgs = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
        cut = int(round(len(imgs) * args.train_fraction))
        for split, part in (("train", imgs[:cut]), ("test", imgs[cut:])):
            splits[split][0].append(part)
            splits[split][1].append(np.full(len(part), c, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    names = {"train": "train", "test": "t10k"}
    for split, (imgs, labels) in splits.items():
        imgs = np.concatenate(imgs)
        labels = np.concatenate(labels)
        # interleave classes deterministically so prefixes stay balanced
        order = np.lexsort((labels, np.concatenate([np.arange(n) for n in np.bincount(labels)])))
        write_idx_array(args.out_dir / f"{names[split]}-images-idx3-ubyte.gz", imgs[order])
        write_idx_array(args.out_dir / f"{names[split]}-labels-idx1-ubyte.gz", labels[order])
        print(split, len(labels), np.bincount(labels).tolist())


if __name__ == "__main__":
    main()
