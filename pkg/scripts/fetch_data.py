#!/usr/bin/env python3
"""Download the three datasets as gzipped IDX files into a data root.

Layout produced:
    <root>/mnist/train-images-idx3-ubyte.gz   (+ labels, + t10k pair)
    <root>/fmnist/...
    <root>/kmnist/...

MNIST and Fashion-MNIST are fetched as published IDX files. KMNIST is
published as PNG-in-parquet on its mirror, so it is converted to IDX here
(needs pandas + pillow, both optional otherwise).

Set CBNET_MIRROR_PREFIX to route all URLs through an HTTP(S) mirror that
forwards path-style requests (e.g. an Artifactory remote repo).
"""

import argparse
import gzip
import io
import os
import struct
import sys
import urllib.request
from pathlib import Path

IDX_FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
             "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")

SOURCES = {
    "mnist": "https://github.com/fgnt/mnist/raw/master/{name}",
    "fmnist": "https://github.com/zalandoresearch/fashion-mnist/raw/master/data/fashion/{name}",
}
KMNIST_PARQUET = {
    "train": "https://huggingface.co/datasets/tanganke/kmnist/resolve/main/kmnist/train-00000-of-00001.parquet",
    "test": "https://huggingface.co/datasets/tanganke/kmnist/resolve/main/kmnist/test-00000-of-00001.parquet",
}


def _mirror(url: str) -> str:
    prefix = os.environ.get("CBNET_MIRROR_PREFIX")
    if not prefix:
        return url
    for scheme in ("https://", "http://"):
        if url.startswith(scheme):
            host, _, path = url[len(scheme):].partition("/")
            mapped = {"github.com": "github", "huggingface.co": "huggingface"}.get(host, host)
            return f"{prefix.rstrip('/')}/{mapped}/{path}"
    return url


def fetch(url: str, dest: Path):
    if dest.exists():
        print(f"have {dest}")
        return
    url = _mirror(url)
    print(f"fetch {url}")
    with urllib.request.urlopen(url, timeout=120) as resp:
        dest.write_bytes(resp.read())


def kmnist_to_idx(parquet_path: Path, img_path: Path, lbl_path: Path):
    import numpy as np
    import pandas as pd
    from PIL import Image

    df = pd.read_parquet(parquet_path)
    n = len(df)
    imgs = np.zeros((n, 28, 28), dtype=np.uint8)
    for i, rec in enumerate(df["image"]):
        imgs[i] = np.asarray(Image.open(io.BytesIO(rec["bytes"])))
    labels = df["label"].to_numpy().astype(np.uint8)
    with gzip.open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28))
        fh.write(imgs.tobytes())
    with gzip.open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, n))
        fh.write(labels.tobytes())
    print(f"wrote {img_path} ({n} images)")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--data-root", required=True)
    parser.add_argument("--datasets", default="mnist,fmnist,kmnist")
    args = parser.parse_args()
    root = Path(args.data_root)

    for dataset in args.datasets.split(","):
        out = root / dataset
        out.mkdir(parents=True, exist_ok=True)
        if dataset in SOURCES:
            for name in IDX_FILES:
                fetch(SOURCES[dataset].format(name=name), out / name)
        elif dataset == "kmnist":
            for split, url in KMNIST_PARQUET.items():
                pq = out / f"{split}.parquet"
                prefix = "train" if split == "train" else "t10k"
                img = out / f"{prefix}-images-idx3-ubyte.gz"
                lbl = out / f"{prefix}-labels-idx1-ubyte.gz"
                if img.exists() and lbl.exists():
                    print(f"have {img}")
                    continue
                fetch(url, pq)
                kmnist_to_idx(pq, img, lbl)
                pq.unlink()
        else:
            print(f"unknown dataset {dataset}", file=sys.stderr)
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
