"""Convert the digits shipped in the npm ``mnist@1.1.0`` package into IDX files.

The package (``npm pack mnist@1.1.0``) carries 10,000 MNIST digits as JSON,
one file per class, with pixels scaled to [0, 1] and rounded to 3 decimals.
Rounding ``v * 255`` recovers the original byte exactly.

Usage::

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_desk_mnist.py package/src/digits data/mnist-desk
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TEST_FRACTION = 0.2
SEED = 20240601


def _write_idx(path: Path, array: np.ndarray, magic: int) -> None:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        pix = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(SEED).permutation(len(labels))
    images, labels = images[order], labels[order]
    n_test = int(round(len(labels) * TEST_FRACTION))

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    _write_idx(out / "train-images-idx3-ubyte.gz", images[n_test:], 0x803)
    _write_idx(out / "train-labels-idx1-ubyte.gz", labels[n_test:], 0x801)
    _write_idx(out / "t10k-images-idx3-ubyte.gz", images[:n_test], 0x803)
    _write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[:n_test], 0x801)
    print(f"train={len(labels) - n_test} test={n_test} -> {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
