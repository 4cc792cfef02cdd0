"""Entropy-gated early exit: inference, joint training, statistics, tuning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ImageSet
from .errors import ConfigError, DomainError, EmptyInputError, NumericalError
from .losses import cross_entropy_batch, cross_entropy_grad_logits
from .network import Network
from .optim import SGD

LN10 = float(np.log(10.0))


def entropy(probs) -> float:
    """Shannon entropy (natural log) of one probability vector; 0*ln(0) = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.min() < -1e-9:
        raise DomainError(f"negative probability {p.min()}")
    p = np.clip(p, 0.0, None)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an (N, K) matrix of probability vectors."""
    p = np.asarray(probs, dtype=np.float64)
    if p.min() < -1e-9:
        raise DomainError(f"negative probability {p.min()}")
    p = np.clip(p, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(p > 0, p * np.log(p), 0.0)
    return -term.sum(axis=-1)


@dataclass
class ExitPolicy:
    """Entropy threshold for the early exit (natural-log units)."""

    threshold: float
    dataset_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.threshold <= LN10 + 1e-9:
            raise DomainError(f"threshold {self.threshold} outside [0, ln 10]")


DEFAULT_THRESHOLDS = {"mnist": 0.05, "fmnist": 0.5, "kmnist": 0.025}


def default_policy(dataset_id: str) -> ExitPolicy:
    return ExitPolicy(DEFAULT_THRESHOLDS[dataset_id], dataset_id)


@dataclass
class ExitOutcome:
    predicted_class: int
    exit_id: int                    # 1-based; 1 is the earliest exit
    entropies: list                 # entropy at each exit that was evaluated
    probs: np.ndarray               # probability vector at the taken exit


def infer_with_exit(network: Network, image, policy: ExitPolicy) -> ExitOutcome:
    """Single-image inference with the entropy gate.

    The shared trunk is evaluated once; deeper stages run only if every
    earlier exit's entropy is >= the threshold.
    """
    h = image
    entropies = []
    last = len(network.stages) - 1
    for i, stage in enumerate(network.stages):
        for layer in stage.trunk:
            h = layer.forward(h)
        probs = h
        for layer in stage.head:
            probs = layer.forward(probs)
        ent = entropy(probs)
        entropies.append(ent)
        if i == last or ent < policy.threshold:
            return ExitOutcome(int(np.argmax(probs)), i + 1, entropies, probs)
    raise AssertionError("unreachable")


def exit_probs(network: Network, images: np.ndarray, chunk=2048) -> list[np.ndarray]:
    """All exits' probability matrices over a batch of images (read-only nets)."""
    outs = None
    for lo in range(0, images.shape[0], chunk):
        part = network.forward_all(images[lo:lo + chunk])
        if outs is None:
            outs = [[p] for p in part]
        else:
            for acc, p in zip(outs, part):
                acc.append(p)
    return [np.concatenate(acc) for acc in outs]


@dataclass
class ExitStats:
    fractions: tuple                # share of samples taking each exit; sums to 1
    per_exit_accuracy: tuple        # accuracy among the samples taking that exit
    overall_accuracy: float
    counts: tuple = field(default=())


def exit_statistics(network: Network, imageset: ImageSet, policy: ExitPolicy) -> ExitStats:
    if len(imageset) == 0:
        raise EmptyInputError("exit statistics over an empty set")
    probs = exit_probs(network, imageset.images)
    n = len(imageset)
    taken = np.full(n, len(probs) - 1, dtype=np.int64)
    for i, p in enumerate(probs[:-1]):
        undecided = taken == len(probs) - 1
        ent = entropy_rows(p)
        taken = np.where(undecided & (ent < policy.threshold), i, taken)
    preds = np.stack([p.argmax(axis=1) for p in probs], axis=1)
    chosen_pred = preds[np.arange(n), taken]
    correct = chosen_pred == imageset.labels
    fractions, accs, counts = [], [], []
    for i in range(len(probs)):
        mask = taken == i
        cnt = int(mask.sum())
        counts.append(cnt)
        fractions.append(cnt / n)
        accs.append(float(correct[mask].mean()) if cnt else float("nan"))
    return ExitStats(tuple(fractions), tuple(accs), float(correct.mean()), tuple(counts))


def _validation_split(n: int, seed: int, held_out: int):
    # cap the held-out slice at 20% so small training sets keep a majority
    order = np.random.default_rng((seed, 0xA11)).permutation(n)
    held_out = min(held_out, max(n // 5, 1))
    return order[:-held_out], order[-held_out:]


def train_joint(network: Network, trainset: ImageSet, exit_weights=None, epochs=50,
                batch_size=128, optimizer=None, seed=0, held_out=5000, patience=5,
                log=None):
    """Joint mini-batch training of all exits.

    Loss is the exit-weight-scaled sum of per-exit cross-entropies; shared
    trunk layers accumulate the gradients of every exit. Per-epoch shuffling
    is seeded; the validation split is the tail of a seeded shuffle of the
    training set. Training stops once validation accuracy (final exit) has
    not improved for `patience` epochs, restoring the best weights.
    """
    k = network.exit_count
    weights = tuple(exit_weights) if exit_weights is not None else (1.0,) * k
    if len(weights) != k:
        raise ConfigError(f"{len(weights)} exit weights for {k} exits")
    if any(w < 0 for w in weights) or not any(weights):
        raise ConfigError("exit weights must be >= 0 and not all zero")
    optimizer = optimizer or SGD(lr=0.01, momentum=0.9)

    train_idx, val_idx = _validation_split(len(trainset), seed, held_out)
    val_images, val_labels = trainset.images[val_idx], trainset.labels[val_idx]
    params = network.params()
    history = {"train_loss": [], "val_accuracy": []}
    best_acc, best_params, since_best = -1.0, None, 0

    for epoch in range(epochs):
        order = np.random.default_rng((seed, 0x5F, epoch)).permutation(train_idx.size)
        epoch_idx = train_idx[order]
        total_loss, batches = 0.0, 0
        for lo in range(0, epoch_idx.size, batch_size):
            sel = epoch_idx[lo:lo + batch_size]
            xb, yb = trainset.images[sel], trainset.labels[sel]
            outs = network.forward_all(xb, train=True)
            loss = sum(w * cross_entropy_batch(p, yb).total
                       for w, p in zip(weights, outs) if w)
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged at epoch {epoch} batch {batches}")
            grads = [cross_entropy_grad_logits(p, yb, weight=w)
                     for w, p in zip(weights, outs)]
            network.backward_from_logits(grads)
            optimizer.step(params, network.grads())
            total_loss += float(loss)
            batches += 1
        history["train_loss"].append(total_loss / max(batches, 1))

        val_preds = _predict_final(network, val_images)
        acc = float((val_preds == val_labels).mean())
        history["val_accuracy"].append(acc)
        if log:
            log(f"epoch {epoch + 1}: loss {history['train_loss'][-1]:.4f} "
                f"val acc {acc * 100:.2f}%")
        if acc > best_acc:
            best_acc, since_best = acc, 0
            best_params = {key: val.copy() for key, val in params.items()}
        else:
            since_best += 1
            if since_best >= patience:
                break

    if best_params is not None:
        network.load_params(best_params)
    network.meta["epochs"] = len(history["train_loss"])
    network.meta["val_accuracy"] = best_acc
    return history


def _predict_final(network: Network, images: np.ndarray, chunk=2048) -> np.ndarray:
    preds = []
    for lo in range(0, images.shape[0], chunk):
        p = network.forward_final(images[lo:lo + chunk])
        preds.append(p.argmax(axis=1))
    return np.concatenate(preds)


def tune_threshold(network: Network, valset: ImageSet, accuracy_budget=0.5,
                   grid_points=100) -> ExitPolicy:
    """Largest threshold whose overall accuracy stays within `accuracy_budget`
    percentage points of the full-network accuracy, over a log-spaced grid."""
    if accuracy_budget < 0:
        raise ConfigError("accuracy budget must be >= 0")
    probs = exit_probs(network, valset.images)
    if len(probs) < 2:
        return ExitPolicy(0.0, valset.dataset_id)
    ent1 = entropy_rows(probs[0])
    pred1 = probs[0].argmax(axis=1)
    pred_full = probs[-1].argmax(axis=1)
    full_acc = float((pred_full == valset.labels).mean())
    best = 0.0
    for t in np.geomspace(1e-3, LN10, grid_points):
        mixed = np.where(ent1 < t, pred1, pred_full)
        acc = float((mixed == valset.labels).mean())
        if acc >= full_acc - accuracy_budget / 100.0 and t > best:
            best = float(t)
    return ExitPolicy(best, valset.dataset_id)
