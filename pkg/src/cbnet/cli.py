"""Command-line front end.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 numerical
errors during training/inference.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench import (
    BenchmarkReport,
    ExperimentConfig,
    checkpoint_path,
    compare,
    reports_to_csv,
    run_experiment,
    sweep_dataset_size,
)
from .converter import (
    CbnetPipeline,
    evaluate_pipeline,
    label_hardness,
    train_autoencoder,
)
from .data import HardnessLabels, load_image_set
from .earlyexit import (
    ExitPolicy,
    DEFAULT_THRESHOLDS,
    exit_statistics,
    train_joint,
    tune_threshold,
)
from .errors import (
    CbnetError,
    ConfigError,
    DataError,
    FormatError,
    NumericalError,
    RangeError,
    TruncationError,
)
from .models import (
    build_branchy_lenet,
    build_converting_autoencoder,
    build_lenet,
    build_lightweight,
    extract_main_path,
    load_checkpoint,
    save_checkpoint,
)
from .optim import SGD

_CONFIG_EXIT = 2
_DATA_EXIT = 3
_NUMERIC_EXIT = 4


def _data_root(args) -> str:
    root = getattr(args, "data_root", None) or os.environ.get("CBNET_DATA_ROOT")
    if not root:
        raise ConfigError("no data root: pass --data-root or set CBNET_DATA_ROOT")
    if not Path(root).is_dir():
        raise DataError(f"data root {root} is not a directory")
    return root


def _explicit_ckpt_dir(args) -> str | None:
    return getattr(args, "ckpt_dir", None) or os.environ.get("CBNET_CKPT_DIR")


def _ckpt_dir(args) -> Path:
    return Path(_explicit_ckpt_dir(args) or "checkpoints")


def _seed(args) -> int:
    return getattr(args, "seed", 0)


def _out(args):
    return getattr(args, "out", None)


def _save(net, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, path)
    print(f"wrote {path}")


def _emit(payload, out_path):
    text = json.dumps(payload, indent=2)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text + "\n")
        print(f"wrote {out_path}")
    else:
        print(text)


def _hardness_path(ckpt_dir: Path, dataset: str, split: str) -> Path:
    return ckpt_dir / dataset / f"hardness-{split}.npz"


def save_hardness(labels: HardnessLabels, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, easy=labels.easy, threshold=labels.threshold,
             checkpoint_id=labels.checkpoint_id)


def load_hardness(path: Path) -> HardnessLabels:
    with np.load(path) as blob:
        return HardnessLabels(easy=blob["easy"], threshold=float(blob["threshold"]),
                              checkpoint_id=str(blob["checkpoint_id"]))


def cmd_train_classifier(args) -> int:
    root = _data_root(args)
    trainset = load_image_set(root, args.dataset, "train")
    if args.limit:
        trainset = trainset.take(np.arange(min(args.limit, len(trainset))))
    if args.model == "branchynet":
        net = build_branchy_lenet(seed=_seed(args), dataset_id=args.dataset)
        weights = tuple(float(w) for w in args.exit_weights.split(","))
    else:
        net = build_lenet(seed=_seed(args), dataset_id=args.dataset)
        weights = (1.0,)
    opt = SGD(lr=args.lr, momentum=args.momentum)
    train_joint(net, trainset, exit_weights=weights, epochs=args.epochs,
                batch_size=args.batch_size, optimizer=opt, seed=_seed(args),
                patience=args.patience, log=print)
    name = "branchy" if args.model == "branchynet" else "lenet"
    _save(net, checkpoint_path(_ckpt_dir(args), args.dataset, name))
    testset = load_image_set(root, args.dataset, "test")
    policy = ExitPolicy(args.threshold if args.threshold is not None
                        else DEFAULT_THRESHOLDS[args.dataset], args.dataset)
    stats = exit_statistics(net, testset, policy)
    print(f"test accuracy (gated): {stats.overall_accuracy * 100:.2f}%")
    print(f"final-exit accuracy: {_final_acc(net, testset):.2f}%")
    if net.has_early_exit:
        print(f"exit fractions at T={policy.threshold}: {[f'{f:.4f}' for f in stats.fractions]}")
    return 0


def _final_acc(net, testset) -> float:
    from .earlyexit import _predict_final
    preds = _predict_final(net, testset.images)
    return float((preds == testset.labels).mean()) * 100.0


def cmd_label_hardness(args) -> int:
    root = _data_root(args)
    ckpt = _ckpt_dir(args)
    imageset = load_image_set(root, args.dataset, args.split)
    branchy = load_checkpoint(checkpoint_path(ckpt, args.dataset, "branchy"))
    threshold = args.threshold if args.threshold is not None else DEFAULT_THRESHOLDS[args.dataset]
    labels = label_hardness(branchy, imageset, ExitPolicy(threshold, args.dataset))
    path = _hardness_path(ckpt, args.dataset, args.split)
    save_hardness(labels, path)
    print(f"wrote {path}: easy fraction {labels.easy_fraction * 100:.2f}% "
          f"at T={threshold}")
    return 0


def cmd_train_autoencoder(args) -> int:
    root = _data_root(args)
    ckpt = _ckpt_dir(args)
    trainset = load_image_set(root, args.dataset, "train")
    hpath = _hardness_path(ckpt, args.dataset, "train")
    if hpath.exists():
        hardness = load_hardness(hpath)
    else:
        branchy = load_checkpoint(checkpoint_path(ckpt, args.dataset, "branchy"))
        threshold = args.threshold if args.threshold is not None else DEFAULT_THRESHOLDS[args.dataset]
        hardness = label_hardness(branchy, trainset, ExitPolicy(threshold, args.dataset))
        save_hardness(hardness, hpath)
    ae = build_converting_autoencoder(args.dataset, args.output_activation, seed=_seed(args))
    train_autoencoder(ae, trainset, hardness, epochs=args.epochs,
                      batch_size=args.batch_size, seed=_seed(args),
                      l1_coeff=args.l1_coeff, patience=args.patience,
                      lr_decay=args.lr_decay, log=print)
    _save(ae, checkpoint_path(ckpt, args.dataset, "autoencoder"))
    return 0


def cmd_extract_lightweight(args) -> int:
    ckpt = _ckpt_dir(args)
    branchy = load_checkpoint(checkpoint_path(ckpt, args.dataset, "branchy"))
    light = build_lightweight(branchy)
    if args.fine_tune:
        from .converter import fine_tune_lightweight
        root = _data_root(args)
        ae = load_checkpoint(checkpoint_path(ckpt, args.dataset, "autoencoder"))
        trainset = load_image_set(root, args.dataset, "train")
        fine_tune_lightweight(light, ae, trainset, epochs=args.fine_tune_epochs,
                              seed=_seed(args), log=print)
    _save(light, checkpoint_path(ckpt, args.dataset, "lightweight"))
    if args.main_path_too:
        _save(extract_main_path(branchy), checkpoint_path(ckpt, args.dataset, "lenet"))
    return 0


def cmd_eval(args) -> int:
    root = _data_root(args)
    ckpt = _ckpt_dir(args)
    testset = load_image_set(root, args.dataset, args.split)
    threshold = args.threshold if args.threshold is not None else DEFAULT_THRESHOLDS[args.dataset]
    if args.model == "cbnet":
        ae = load_checkpoint(checkpoint_path(ckpt, args.dataset, "autoencoder"))
        clf = load_checkpoint(checkpoint_path(ckpt, args.dataset, "lightweight"))
        result = evaluate_pipeline(CbnetPipeline(ae, clf, args.dataset), testset,
                                   measure_latency=False)
        payload = {"model": "cbnet", "dataset": args.dataset,
                   "accuracy_pct": result["accuracy"] * 100.0, "n": result["n"]}
    else:
        name = {"branchynet": "branchy", "lenet": "lenet", "lightweight": "lightweight"}[args.model]
        net = load_checkpoint(checkpoint_path(ckpt, args.dataset, name))
        stats = exit_statistics(net, testset, ExitPolicy(threshold, args.dataset))
        payload = {"model": args.model, "dataset": args.dataset,
                   "accuracy_pct": stats.overall_accuracy * 100.0,
                   "exit_fractions": list(stats.fractions),
                   "per_exit_accuracy_pct": [a * 100.0 for a in stats.per_exit_accuracy],
                   "threshold": threshold, "n": len(testset)}
    _emit(payload, _out(args))
    return 0


def _bench_config(args) -> ExperimentConfig:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {
        "dataset": args.dataset, "variant": args.model, "threshold": args.threshold,
        "power_preset": args.power_preset, "power_trace": args.power_trace,
        "subset_ratio": args.subset_ratio, "repeats": args.repeats,
        "checkpoint_dir": _explicit_ckpt_dir(args),
    }
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = _seed(args)
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    base.setdefault("power_preset", "pi4")
    if "dataset" not in base or "variant" not in base:
        raise ConfigError("bench needs a dataset and a model variant "
                          "(flags or --config file)")
    return ExperimentConfig.from_dict(base)


def cmd_bench(args) -> int:
    root = _data_root(args)
    report = run_experiment(_bench_config(args), root)
    _emit(report.to_dict(), _out(args))
    if args.csv:
        reports_to_csv([report], args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_sweep(args) -> int:
    root = _data_root(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    config = _bench_config(args)
    reports = sweep_dataset_size(config, ratios, root)
    _emit([r.to_dict() for r in reports], _out(args))
    if args.csv:
        reports_to_csv(reports, args.csv)
        print(f"wrote {args.csv}")
    return 0


def cmd_compare(args) -> int:
    reports = [BenchmarkReport.load(p) for p in args.reports]
    table = compare(reports, baseline=args.baseline)
    _emit(table, _out(args))
    return 0


def cmd_tune_threshold(args) -> int:
    root = _data_root(args)
    ckpt = _ckpt_dir(args)
    net = load_checkpoint(checkpoint_path(ckpt, args.dataset, "branchy"))
    valset = load_image_set(root, args.dataset, args.split)
    policy = tune_threshold(net, valset, accuracy_budget=args.budget)
    stats = exit_statistics(net, valset, policy)
    _emit({"dataset": args.dataset, "threshold": policy.threshold,
           "budget_pts": args.budget,
           "early_exit_fraction": stats.fractions[0],
           "accuracy_pct": stats.overall_accuracy * 100.0}, _out(args))
    return 0


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root", default=argparse.SUPPRESS,
                        help="directory holding mnist/ fmnist/ kmnist/ "
                             "(or set CBNET_DATA_ROOT)")
    common.add_argument("--ckpt-dir", default=argparse.SUPPRESS,
                        help="checkpoint directory "
                             "(or CBNET_CKPT_DIR; default ./checkpoints)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="write JSON output here instead of stdout")

    parser = argparse.ArgumentParser(prog="cbnet", description=__doc__,
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def common_ds(p):
        p.add_argument("--dataset", required=True, choices=("mnist", "fmnist", "kmnist"))

    p = sub.add_parser("train-classifier", parents=[common], help="train the plain or branched classifier")
    p.add_argument("model", choices=("lenet", "branchynet"))
    common_ds(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--exit-weights", default="1,1")
    p.add_argument("--threshold", type=float)
    p.add_argument("--limit", type=int, help="train on the first N images only")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("label-hardness", parents=[common], help="flag images easy/hard with the branched model")
    common_ds(p)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_label_hardness)

    p = sub.add_parser("train-autoencoder", parents=[common], help="train the hard-to-easy converter")
    common_ds(p)
    p.add_argument("--output-activation", default="sigmoid", choices=("sigmoid", "softmax"))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--l1-coeff", type=float, default=1e-8)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--lr-decay", type=float, default=1.0,
                   help="per-epoch learning-rate multiplier")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_train_autoencoder)

    p = sub.add_parser("extract-lightweight", parents=[common], help="truncate the branched model to its early exit")
    common_ds(p)
    p.add_argument("--main-path-too", action="store_true",
                   help="also write the single-exit backbone as the lenet checkpoint")
    p.add_argument("--fine-tune", action="store_true",
                   help="adapt the truncated classifier to converter outputs "
                        "(needs the trained autoencoder checkpoint; default off)")
    p.add_argument("--fine-tune-epochs", type=int, default=10)
    p.set_defaults(func=cmd_extract_lightweight)

    p = sub.add_parser("eval", parents=[common], help="accuracy / exit statistics of a model")
    common_ds(p)
    p.add_argument("--model", required=True,
                   choices=("lenet", "branchynet", "cbnet", "lightweight"))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    def bench_flags(p):
        p.add_argument("--dataset", choices=("mnist", "fmnist", "kmnist"))
        p.add_argument("--model", choices=("lenet", "branchynet", "cbnet"))
        p.add_argument("--config", help="JSON experiment config file")
        p.add_argument("--threshold", type=float)
        p.add_argument("--power-preset", choices=("gci", "pi4"))
        p.add_argument("--power-trace", help="CSV of externally measured power")
        p.add_argument("--subset-ratio", type=float)
        p.add_argument("--repeats", type=int)
        p.add_argument("--csv", help="also flatten report(s) to this CSV")

    p = sub.add_parser("bench", parents=[common], help="timed benchmark run producing a JSON report")
    bench_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", parents=[common], help="benchmark across ascending dataset-size ratios")
    bench_flags(p)
    p.add_argument("--ratios", default="0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="speedup/savings table from saved reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", type=int, default=0,
                   help="index of the baseline report (default: first)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("tune-threshold", parents=[common], help="largest threshold within the accuracy budget")
    common_ds(p)
    p.add_argument("--budget", type=float, default=0.5,
                   help="tolerated accuracy drop, percentage points")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_tune_threshold)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _CONFIG_EXIT
    except (DataError, FormatError, TruncationError, RangeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return _NUMERIC_EXIT
    except CbnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
