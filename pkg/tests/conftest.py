"""Shared fixtures.

Tests marked `trained` need real dataset files plus pretrained checkpoints:
set CBNET_DATA_ROOT and CBNET_CKPT_DIR (see README, scripts/train_all.py).
They skip with an explicit message when either is missing.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from cbnet.data import ImageSet


def data_root() -> Path | None:
    root = os.environ.get("CBNET_DATA_ROOT")
    return Path(root) if root and Path(root).is_dir() else None


def ckpt_dir() -> Path | None:
    ck = os.environ.get("CBNET_CKPT_DIR")
    return Path(ck) if ck and Path(ck).is_dir() else None


def require_data(dataset: str) -> Path:
    root = data_root()
    if root is None or not (root / dataset).is_dir():
        pytest.skip(f"dataset files for {dataset} not found; set CBNET_DATA_ROOT")
    return root


def require_checkpoint(dataset: str, name: str) -> Path:
    ck = ckpt_dir()
    if ck is None:
        pytest.skip("no checkpoint directory; set CBNET_CKPT_DIR (scripts/train_all.py)")
    path = ck / dataset / f"{name}.ckpt"
    if not path.exists():
        pytest.skip(f"checkpoint {path} missing; run scripts/train_all.py")
    return path


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


def synthetic_image_set(n=600, seed=0, dataset_id="synth", split="train") -> ImageSet:
    """Ten separable 28x28 pattern classes with per-sample jitter and noise.

    Small networks learn this quickly, which makes end-to-end pipeline tests
    (training, hardness labeling, conversion) cheap and deterministic.
    """
    gen = np.random.default_rng(seed)
    labels = gen.integers(0, 10, size=n)
    images = gen.normal(0.08, 0.05, size=(n, 1, 28, 28)).astype(np.float32)
    yy, xx = np.mgrid[0:28, 0:28]
    for i, cls in enumerate(labels):
        cx = 6 + 2 * (cls % 5) + gen.integers(-1, 2)
        cy = 8 + 12 * (cls // 5) + gen.integers(-1, 2)
        blob = np.exp(-(((xx - cx) ** 2) + ((yy - cy) ** 2)) / (2.0 * (1.5 + cls * 0.12) ** 2))
        images[i, 0] += blob.astype(np.float32)
        if cls % 2:
            images[i, 0, :, 26] += 0.6
    images = np.clip(images, 0.0, 1.0)
    return ImageSet(images, labels.astype(np.int64), dataset_id, split)


@pytest.fixture(scope="session")
def synth_train():
    return synthetic_image_set(n=900, seed=7, split="train")


@pytest.fixture(scope="session")
def synth_test():
    return synthetic_image_set(n=300, seed=8, split="test")


@pytest.fixture(scope="session")
def bench_env(tmp_path_factory, synth_train, synth_test):
    """Miniature data root + checkpoint tree for exercising the harness.

    Synthetic patterns are written as IDX files under the 'mnist' dataset id
    and small networks are trained for a few epochs, so benchmark plumbing
    (subsets, reports, sweeps, the CLI) runs end to end in seconds.
    """
    from cbnet.cli import save_hardness
    from cbnet.converter import label_hardness, train_autoencoder
    from cbnet.data import denormalize, write_idx_images, write_idx_labels
    from cbnet.earlyexit import ExitPolicy, train_joint
    from cbnet.models import (
        build_branchy_lenet,
        build_converting_autoencoder,
        build_lightweight,
        extract_main_path,
        save_checkpoint,
    )

    base = tmp_path_factory.mktemp("bench_env")
    data_root = base / "data"
    ckpt_dir = base / "ckpt"
    (data_root / "mnist").mkdir(parents=True)
    (ckpt_dir / "mnist").mkdir(parents=True)

    write_idx_images(data_root / "mnist" / "train-images-idx3-ubyte",
                     denormalize(synth_train.images))
    write_idx_labels(data_root / "mnist" / "train-labels-idx1-ubyte",
                     synth_train.labels)
    write_idx_images(data_root / "mnist" / "t10k-images-idx3-ubyte.gz",
                     denormalize(synth_test.images), gzip_wrap=True)
    write_idx_labels(data_root / "mnist" / "t10k-labels-idx1-ubyte.gz",
                     synth_test.labels, gzip_wrap=True)

    branchy = build_branchy_lenet(seed=0, dataset_id="mnist")
    train_joint(branchy, synth_train, epochs=5, batch_size=64, seed=0,
                held_out=150, patience=10)
    save_checkpoint(branchy, ckpt_dir / "mnist" / "branchy.ckpt")
    save_checkpoint(extract_main_path(branchy), ckpt_dir / "mnist" / "lenet.ckpt")
    save_checkpoint(build_lightweight(branchy), ckpt_dir / "mnist" / "lightweight.ckpt")

    policy = ExitPolicy(0.5, "mnist")
    hardness = label_hardness(branchy, synth_train, policy)
    # the short training run may leave a class without easy exemplars or a
    # degenerate pool; patch the flags so subset/converter plumbing is exercised
    for cls in range(10):
        members = np.flatnonzero(synth_train.labels == cls)
        if not hardness.easy[members].any():
            hardness.easy[members[:3]] = True
    if hardness.easy.all():
        hardness.easy[::10] = False
    save_hardness(hardness, ckpt_dir / "mnist" / "hardness-train.npz")

    ae = build_converting_autoencoder("mnist", seed=0)
    train_autoencoder(ae, synth_train, hardness, epochs=3, batch_size=128, seed=0,
                      held_out=150, patience=10)
    save_checkpoint(ae, ckpt_dir / "mnist" / "autoencoder.ckpt")

    return {"data_root": data_root, "ckpt_dir": ckpt_dir,
            "threshold": policy.threshold}
