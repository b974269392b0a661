#!/usr/bin/env python3
"""Build the desk-scale binarized MNIST split used by the acceptance tests.

Source: the 10,000 digits bundled with the `mnist` npm package (v1.1.0,
MIT), fetched with `npm pack mnist@1.1.0`. Gray levels are binarized once by
seeded Bernoulli sampling, shuffled, and split 5000/2500/2500 into .amat files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/prepare_mnist_subset.py package/src/digits data/mnist-desk
"""

import argparse
import json
from pathlib import Path

import numpy as np

SPLITS = (("train", 5000), ("valid", 2500), ("test", 2500))


def load_digits(src: Path) -> np.ndarray:
    parts = []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        parts.append(flat.reshape(-1, 784))
    return np.concatenate(parts)


def write_amat(path: Path, images: np.ndarray) -> None:
    with path.open("w", newline="\n") as f:
        for row in images:
            f.write(" ".join("1" if v else "0" for v in row))
            f.write("\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()

    gray = np.clip(load_digits(args.digits_dir), 0.0, 1.0)
    rng = np.random.default_rng(args.seed)
    binary = rng.random(gray.shape) < gray
    binary = binary[rng.permutation(len(binary))]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    for name, n in SPLITS:
        write_amat(args.out_dir / f"binarized_mnist_{name}.amat", binary[start : start + n])
        start += n
    print(f"wrote {start} of {len(binary)} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
