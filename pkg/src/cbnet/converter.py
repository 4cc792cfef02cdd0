"""Hard-to-easy conversion: hardness labeling, pair sampling, autoencoder
training, and the two-stage (autoencoder -> lightweight classifier) pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import ClassIndex, HardnessLabels, ImageSet, build_class_index
from .earlyexit import ExitPolicy, entropy_rows, exit_probs
from .errors import EmptyInputError, NumericalError, PipelineError
from .losses import l1_activity_penalty, mse_loss
from .models import FLAT_DIM, IMAGE_SHAPE
from .network import Network
from .optim import Adam


def checkpoint_id(network: Network) -> str:
    meta = network.meta
    return (f"{meta.get('arch', '?')}-{meta.get('dataset', '?')}"
            f"-s{meta.get('seed', '?')}-e{meta.get('epochs', '?')}")


def label_hardness(branchy: Network, imageset: ImageSet, policy: ExitPolicy) -> HardnessLabels:
    """Flag each image easy iff it would take the early exit under `policy`."""
    probs = exit_probs(branchy, imageset.images)
    ent = entropy_rows(probs[0])
    return HardnessLabels(easy=ent < policy.threshold, threshold=policy.threshold,
                          checkpoint_id=checkpoint_id(branchy))


@dataclass
class TrainingPair:
    input_index: int
    target_index: int
    epoch: int


def build_training_pairs(imageset: ImageSet, class_index: ClassIndex, seed: int,
                         epoch: int) -> np.ndarray:
    """Target index for every training image: a uniformly drawn easy image of
    the same class. Deterministic given (seed, epoch); resampled per epoch.

    epoch -1 is reserved for the fixed held-out validation pairs."""
    rng = np.random.default_rng((seed, 0x9A1D, epoch & 0xFFFFFFFF))
    targets = np.empty(len(imageset), dtype=np.int64)
    for cls in range(10):
        members = np.flatnonzero(imageset.labels == cls)
        pool = class_index.pool(cls)
        if members.size:
            targets[members] = pool[rng.integers(0, pool.size, size=members.size)]
    return targets


def pair_records(targets: np.ndarray, epoch: int):
    for i, t in enumerate(targets):
        yield TrainingPair(i, int(t), epoch)


def train_autoencoder(ae: Network, trainset: ImageSet, hardness: HardnessLabels,
                      epochs=50, batch_size=256, seed=0, l1_coeff=1e-8,
                      optimizer=None, held_out=5000, patience=5, lr_decay=1.0,
                      log=None):
    """Train the converter: MSE toward a same-class easy target plus an L1
    activity penalty on the encoder bottleneck output.

    Targets are re-drawn each epoch. Early stopping watches reconstruction
    loss on a held-out slice of the training set (fixed targets), restoring
    the best weights. lr_decay < 1 multiplies the learning rate per epoch.
    """
    class_index = build_class_index(trainset, hardness)
    optimizer = optimizer or Adam(lr=1e-3)
    layers = ae.stages[0].trunk
    bottleneck = ae.meta["bottleneck_layer"]
    params = ae.params()

    flat = trainset.images.reshape(len(trainset), FLAT_DIM)
    order = np.random.default_rng((seed, 0xAE)).permutation(len(trainset))
    held_out = min(held_out, max(len(trainset) // 5, 1))
    train_idx, val_idx = order[:-held_out], order[-held_out:]
    val_targets = build_training_pairs(trainset, class_index, seed, epoch=-1)[val_idx]
    val_in, val_out = flat[val_idx], flat[val_targets]

    history = {"train_loss": [], "mse": [], "l1": [], "val_loss": []}
    best_loss, best_params, since_best = np.inf, None, 0

    for epoch in range(epochs):
        targets = build_training_pairs(trainset, class_index, seed, epoch)
        shuffle = np.random.default_rng((seed, 0xE90C, epoch)).permutation(train_idx.size)
        epoch_idx = train_idx[shuffle]
        sums = {"total": 0.0, "mse": 0.0, "l1": 0.0}
        batches = 0
        for lo in range(0, epoch_idx.size, batch_size):
            sel = epoch_idx[lo:lo + batch_size]
            xb = flat[sel]
            tb = flat[targets[sel]]
            acts = []
            h = xb
            for layer in layers:
                h = layer.forward(h, train=True)
                acts.append(h)
            data_loss, grad = mse_loss(h, tb)
            reg_loss, reg_grad = l1_activity_penalty(acts[bottleneck], l1_coeff)
            reg_scale = 1.0 / xb.shape[0]
            total = data_loss.total + reg_loss.total * reg_scale
            if not np.isfinite(total):
                raise NumericalError(f"autoencoder loss diverged at epoch {epoch} "
                                     f"batch {batches}")
            for i in range(len(layers) - 1, -1, -1):
                if i == bottleneck:
                    grad = grad + reg_grad * reg_scale
                grad = layers[i].backward(grad)
            optimizer.step(params, ae.grads())
            sums["total"] += total
            sums["mse"] += data_loss.total
            sums["l1"] += reg_loss.total * reg_scale
            batches += 1
        for key, dest in (("total", "train_loss"), ("mse", "mse"), ("l1", "l1")):
            history[dest].append(sums[key] / max(batches, 1))
        optimizer.lr *= lr_decay

        val_recon = _forward_flat(ae, val_in)
        val_loss = float(np.mean((val_recon - val_out) ** 2))
        history["val_loss"].append(val_loss)
        if log:
            log(f"epoch {epoch + 1}: loss {history['train_loss'][-1]:.5f} "
                f"val recon {val_loss:.5f}")
        if val_loss < best_loss - 1e-7:
            best_loss, since_best = val_loss, 0
            best_params = {key: val.copy() for key, val in params.items()}
        else:
            since_best += 1
            if since_best >= patience:
                break

    if best_params is not None:
        ae.load_params(best_params)
    ae.meta["epochs"] = len(history["train_loss"])
    ae.meta["val_recon_loss"] = best_loss
    return history


def _forward_flat(ae: Network, flat_images: np.ndarray, chunk=4096) -> np.ndarray:
    outs = []
    for lo in range(0, flat_images.shape[0], chunk):
        h = flat_images[lo:lo + chunk]
        for layer in ae.stages[0].trunk:
            h = layer.forward(h)
        outs.append(h)
    return np.concatenate(outs)


def convert(ae: Network, images: np.ndarray) -> np.ndarray:
    """Deterministic forward pass, reshaped back to classifier input layout."""
    single = images.ndim == 3
    batch = images[None] if single else images
    out = _forward_flat(ae, batch.reshape(batch.shape[0], FLAT_DIM))
    out = out.reshape((batch.shape[0],) + IMAGE_SHAPE)
    return out[0] if single else out


def fine_tune_lightweight(classifier: Network, ae: Network, trainset: ImageSet,
                          epochs=10, batch_size=128, seed=0, lr=0.005,
                          held_out=5000, patience=3, log=None):
    """Optionally adapt the truncated classifier to converter outputs.

    Off by default everywhere: the shipped pipeline uses pure truncation.
    Trains on converted training images against the original labels.
    """
    from .earlyexit import train_joint
    from .optim import SGD

    converted = convert(ae, trainset.images)
    conv_set = ImageSet(converted.astype(np.float32), trainset.labels,
                        trainset.dataset_id, trainset.split + "+converted")
    history = train_joint(classifier, conv_set, epochs=epochs, batch_size=batch_size,
                          optimizer=SGD(lr=lr, momentum=0.9), seed=seed,
                          held_out=held_out, patience=patience, log=log)
    classifier.meta["fine_tuned_on_converted"] = True
    return history


@dataclass
class CbnetPipeline:
    """Converter followed by the truncated lightweight classifier."""

    autoencoder: Network
    classifier: Network
    dataset_id: str = ""

    def __post_init__(self):
        dec = self.autoencoder.stages[0].trunk[-2]
        if getattr(dec, "d_out", None) != FLAT_DIM:
            raise PipelineError("autoencoder output width does not match classifier input")
        if self.classifier.meta.get("input", "image") != "image":
            raise PipelineError("classifier does not take image input")

    @property
    def output_activation(self) -> str:
        return self.autoencoder.meta.get("output_activation", "sigmoid")


def cbnet_infer(pipeline: CbnetPipeline, image: np.ndarray):
    """(predicted class, converter seconds, classifier seconds) for one image."""
    t0 = time.perf_counter()
    converted = convert(pipeline.autoencoder, image)
    t1 = time.perf_counter()
    probs = pipeline.classifier.forward_final(converted)
    t2 = time.perf_counter()
    return int(np.argmax(probs)), t1 - t0, t2 - t1


def pipeline_predictions(pipeline: CbnetPipeline, images: np.ndarray, chunk=2048) -> np.ndarray:
    preds = []
    for lo in range(0, images.shape[0], chunk):
        converted = convert(pipeline.autoencoder, images[lo:lo + chunk])
        probs = pipeline.classifier.forward_final(converted)
        preds.append(probs.argmax(axis=1))
    return np.concatenate(preds)


def evaluate_pipeline(pipeline: CbnetPipeline, testset: ImageSet, measure_latency=True,
                      warmup=50):
    """Accuracy over the set plus, optionally, sequential per-image timings.

    Latency is measured single-threaded at batch size one after `warmup`
    untimed inferences; accuracy comes from an exact batched pass.
    """
    if len(testset) == 0:
        raise EmptyInputError("evaluate_pipeline over an empty set")
    preds = pipeline_predictions(pipeline, testset.images)
    accuracy = float((preds == testset.labels).mean())
    result = {"accuracy": accuracy, "n": len(testset)}
    if measure_latency:
        images = testset.images
        for i in range(min(warmup, len(testset))):
            cbnet_infer(pipeline, images[i % len(testset)])
        t_ae = t_clf = 0.0
        wall0 = time.perf_counter()
        for i in range(len(testset)):
            _, a, c = cbnet_infer(pipeline, images[i])
            t_ae += a
            t_clf += c
        wall = time.perf_counter() - wall0
        result.update({
            "total_time_s": wall,
            "latency_ms": wall / len(testset) * 1e3,
            "t_autoencoder_ms": t_ae / len(testset) * 1e3,
            "t_classifier_ms": t_clf / len(testset) * 1e3,
        })
    return result
