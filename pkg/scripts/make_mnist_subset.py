"""Build the small MNIST fixture used by the scaled-down MNIST test.

Input is a directory of per-digit JSON files ``0.json`` .. ``9.json`` as
shipped in the ``mnist`` npm package (``src/digits``), each holding
``{"data": [...]}`` with 784 intensities in [0, 1] per image.  The values
are byte intensities divided by 255 and rounded, so ``round(v * 255)``
recovers the original bytes.

Writes gzipped IDX files: 500 training and 100 test images per digit,
disjoint, in a seeded shuffled order.

    python scripts/make_mnist_subset.py /path/to/mnist/src/digits tests/data/mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from sacn.data import write_idx


def load_digit(path: Path) -> np.ndarray:
    flat = np.asarray(json.loads(path.read_text())["data"], dtype=np.float64)
    if flat.size % 784:
        raise ValueError(f"{path}: {flat.size} values is not a whole number of 28x28 images")
    return np.rint(flat * 255).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-per-digit", type=int, default=500)
    ap.add_argument("--test-per-digit", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    parts = {"train": ([], []), "test": ([], [])}
    for d in range(10):
        imgs = load_digit(args.digits_dir / f"{d}.json")
        need = args.train_per_digit + args.test_per_digit
        if len(imgs) < need:
            raise SystemExit(f"digit {d}: only {len(imgs)} images, need {need}")
        pick = rng.permutation(len(imgs))[:need]
        cut = args.train_per_digit
        for split, sel in (("train", pick[:cut]), ("test", pick[cut:])):
            parts[split][0].append(imgs[sel])
            parts[split][1].append(np.full(len(sel), d, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, (xs, ys) in parts.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(x))
        write_idx(args.out_dir / f"{split}-images-idx3-ubyte.gz", x[order])
        write_idx(args.out_dir / f"{split}-labels-idx1-ubyte.gz", y[order])
        print(f"{split}: {len(x)} images")


if __name__ == "__main__":
    main()
