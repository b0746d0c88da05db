"""Rebuild the standard CIFAR-10 binary batches from the `tfjs-cifar10` npm sprites.

The npm package stores each split as a lossless PNG with one image per row
(1024 RGB pixels, raster order) and the labels as JSON arrays. This writes
``data_batch_{1..5}.bin`` and ``test_batch.bin`` in the canonical
1-label-byte + 3072-channel-planar-byte record layout.

    npm pack tfjs-cifar10 && tar xzf tfjs-cifar10-*.tgz
    python scripts/rebuild_cifar10_bin.py package/ /root/data/cifar-10-batches-bin
"""
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def convert(sprite: Path, labels: list[int], out: Path) -> None:
    pixels = np.asarray(Image.open(sprite).convert("RGB"), dtype=np.uint8)
    n = pixels.shape[0]
    if len(labels) != n:
        raise ValueError(f"{sprite}: {n} rows but {len(labels)} labels")
    planar = pixels.reshape(n, 1024, 3).transpose(0, 2, 1).reshape(n, 3072)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planar], axis=1)
    out.write_bytes(records.tobytes())


def main(src: str, dst: str) -> None:
    src_dir, dst_dir = Path(src), Path(dst)
    dst_dir.mkdir(parents=True, exist_ok=True)
    train = json.loads((src_dir / "train_lables.json").read_text())
    for b in range(5):
        convert(src_dir / f"data_batch_{b + 1}.png", train[b * 10000:(b + 1) * 10000],
                dst_dir / f"data_batch_{b + 1}.bin")
    test = json.loads((src_dir / "test_lables.json").read_text())
    convert(src_dir / "test_batch.png", test, dst_dir / "test_batch.bin")
    names = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
    (dst_dir / "batches.meta.txt").write_text("\n".join(names) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:3])
