"""Write a 4000/1000 MNIST subset as gzipped IDX files.

The pixels come from the 5000-example MNIST sample bundled with ``mlxtend``
(500 per digit), so no network access is needed. Each digit is shuffled with a
fixed seed and split 400 train / 100 test.

    python -m hydrafl.mnist_subset data/mnist5k
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import write_idx_images, write_idx_labels

FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


def export(out_dir: str | Path, train_per_class: int = 400, seed: int = 0) -> dict[str, Path]:
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("the MNIST subset needs mlxtend (pip install 'artifact[mnist]')") from exc

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {key: out / name for key, name in FILES.items()}
    if all(p.exists() for p in paths.values()):
        return paths

    features, labels = mnist_data()
    images = np.rint(features).astype(np.uint8).reshape(-1, 28, 28)
    labels = labels.astype(np.int64)
    rng = np.random.Generator(np.random.PCG64(seed))
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))

    write_idx_images(paths["train_images"], images[train_idx])
    write_idx_labels(paths["train_labels"], labels[train_idx])
    write_idx_images(paths["test_images"], images[test_idx])
    write_idx_labels(paths["test_labels"], labels[test_idx])
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--train-per-class", type=int, default=400)
    args = parser.parse_args(argv)
    for key, path in export(args.out_dir, args.train_per_class).items():
        print(f"{key}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
