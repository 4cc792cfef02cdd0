#!/usr/bin/env python3
"""Train every artifact the benchmarks need, one dataset at a time.

Produces, under the checkpoint directory:
    <dataset>/branchy.ckpt        jointly trained two-exit classifier
    <dataset>/lenet.ckpt          single-exit backbone (extracted main path)
    <dataset>/lightweight.ckpt    truncated early-exit classifier
    <dataset>/autoencoder.ckpt    hard-to-easy converter
    <dataset>/hardness-train.npz  easy/hard flags used for converter training

Usage:
    python scripts/train_all.py --data-root /path/to/data [--datasets mnist,fmnist]
        [--quick]     # small-subset smoke run (minutes, reduced accuracy)
"""

import argparse
import sys
import time

from cbnet.cli import main as cbnet_main


def run(args):
    print(f"+ cbnet {' '.join(args)}", flush=True)
    code = cbnet_main(args)
    if code != 0:
        print(f"step failed with exit code {code}", file=sys.stderr)
        sys.exit(code)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--data-root", required=True)
    parser.add_argument("--ckpt-dir", default="checkpoints")
    parser.add_argument("--datasets", default="mnist,fmnist,kmnist")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--ae-epochs", type=int, default=40)
    parser.add_argument("--fine-tune", action="store_true",
                        help="adapt the truncated classifier to converter outputs "
                             "after autoencoder training (default: pure truncation)")
    parser.add_argument("--quick", action="store_true",
                        help="10k-image subset, few epochs; for smoke testing only")
    args = parser.parse_args()

    base = ["--data-root", args.data_root, "--ckpt-dir", args.ckpt_dir,
            "--seed", str(args.seed)]
    epochs = 4 if args.quick else args.epochs
    ae_epochs = 4 if args.quick else args.ae_epochs
    limit = ["--limit", "10000"] if args.quick else []

    for dataset in args.datasets.split(","):
        t0 = time.perf_counter()
        run(base + ["train-classifier", "branchynet", "--dataset", dataset,
                    "--epochs", str(epochs)] + limit)
        run(base + ["extract-lightweight", "--dataset", dataset, "--main-path-too"])
        run(base + ["label-hardness", "--dataset", dataset, "--split", "train"])
        run(base + ["train-autoencoder", "--dataset", dataset,
                    "--epochs", str(ae_epochs)])
        if args.fine_tune:
            run(base + ["extract-lightweight", "--dataset", dataset, "--fine-tune"])
        print(f"=== {dataset} done in {(time.perf_counter() - t0) / 60:.1f} min ===",
              flush=True)


if __name__ == "__main__":
    main()
