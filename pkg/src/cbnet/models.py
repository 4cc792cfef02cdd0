"""Architecture builders and the binary checkpoint format.

Three model families share one backbone vocabulary:

* a LeNet-style classifier: conv(5x5x5, pad 3) -> pool -> conv(10x5x5, pad 3)
  -> pool -> conv(20x5x5, pad 3) -> pool -> fc 84 -> fc 10 softmax;
* its branched variant adding one early exit after the first pool:
  conv(10x3x3, pad 1) -> pool -> fc 10 softmax;
* per-dataset fully-connected autoencoders (784 in / 784 out) whose hidden
  widths and activations differ by dataset.

Weight init is Glorot-uniform seeded per (seed, layer-name), so layers shared
between architectures (e.g. the backbone of the branched and plain variants)
start bit-identical under the same seed.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArchitectureError,
    FormatError,
    ProfileError,
    TruncationError,
    VersionError,
)
from .layers import Conv2d, Dense, Flatten, MaxPool2d, Relu, Softmax, make_activation
from .network import Network, Stage

CHECKPOINT_MAGIC = b"CBNT"
CHECKPOINT_VERSION = 1

IMAGE_SHAPE = (1, 28, 28)
FLAT_DIM = 784


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng((int(seed), zlib.crc32(name.encode())))


def _conv(name, cin, cout, k, pad, seed, dtype, input_grad=True):
    return Conv2d(name, cin, cout, k, stride=1, padding=pad,
                  rng=_layer_rng(seed, name), dtype=dtype, input_grad=input_grad)


def _dense(name, din, dout, seed, dtype):
    return Dense(name, din, dout, rng=_layer_rng(seed, name), dtype=dtype)


def _backbone_entry(seed, dtype):
    # conv1 is always the first layer, so its input gradient is never consumed
    return [_conv("conv1", 1, 5, 5, 3, seed, dtype, input_grad=False), Relu(), MaxPool2d(2, 2)]


def _branch_head(seed, dtype):
    return [_conv("branch_conv", 5, 10, 3, 1, seed, dtype), Relu(), MaxPool2d(2, 2),
            Flatten(), _dense("branch_fc", 490, 10, seed, dtype), Softmax()]


def _backbone_tail(seed, dtype):
    return [_conv("conv2", 5, 10, 5, 3, seed, dtype), Relu(), MaxPool2d(2, 2),
            _conv("conv3", 10, 20, 5, 3, seed, dtype), Relu(), MaxPool2d(2, 2),
            Flatten(), _dense("fc1", 500, 84, seed, dtype), Relu()]


def _final_head(seed, dtype):
    return [_dense("fc2", 84, 10, seed, dtype), Softmax()]


def build_branchy_lenet(seed=0, dtype=np.float32, dataset_id="") -> Network:
    """Two-exit classifier: early branch after the first pool, full path tail."""
    stages = [
        Stage(_backbone_entry(seed, dtype), _branch_head(seed, dtype)),
        Stage(_backbone_tail(seed, dtype), _final_head(seed, dtype)),
    ]
    return Network(stages, meta={"arch": "branchy_lenet", "dataset": dataset_id,
                                 "seed": int(seed), "input": "image"})


def build_lenet(seed=0, dtype=np.float32, dataset_id="") -> Network:
    """Single-exit classifier: the branched variant's main path only."""
    trunk = _backbone_entry(seed, dtype) + _backbone_tail(seed, dtype)
    return Network([Stage(trunk, _final_head(seed, dtype))],
                   meta={"arch": "lenet", "dataset": dataset_id,
                         "seed": int(seed), "input": "image"})


def _build_lightweight_arch(seed=0, dtype=np.float32, dataset_id="") -> Network:
    trunk = _backbone_entry(seed, dtype)
    return Network([Stage(trunk, _branch_head(seed, dtype))],
                   meta={"arch": "lightweight", "dataset": dataset_id,
                         "seed": int(seed), "input": "image"})


def build_lightweight(trained: Network) -> Network:
    """Truncate a trained two-exit classifier to its early-exit path.

    Copies weights; no retraining. The result computes exactly the same
    function as the source network's first exit.
    """
    if not trained.has_early_exit:
        raise ArchitectureError("source network has no early exit to truncate to")
    net = _build_lightweight_arch(seed=trained.meta.get("seed", 0),
                                  dataset_id=trained.meta.get("dataset", ""))
    source = {k: v.copy() for k, v in trained.params().items()}
    net.load_params({k: source[k] for k in net.params()})
    net.meta["source_arch"] = trained.meta.get("arch", "")
    net.meta["source_epochs"] = trained.meta.get("epochs", 0)
    return net


def extract_main_path(trained: Network) -> Network:
    """The single-exit backbone of a trained two-exit classifier, weights copied."""
    if not trained.has_early_exit:
        raise ArchitectureError("source network has no early exit")
    net = build_lenet(seed=trained.meta.get("seed", 0),
                      dataset_id=trained.meta.get("dataset", ""))
    source = {k: v.copy() for k, v in trained.params().items()}
    net.load_params({k: source[k] for k in net.params()})
    net.meta["source_arch"] = trained.meta.get("arch", "")
    net.meta["epochs"] = trained.meta.get("epochs", 0)
    return net


@dataclass(frozen=True)
class AutoencoderProfile:
    dataset_id: str
    widths: tuple          # three hidden widths; input and output are 784
    activations: tuple     # activation after each hidden layer


AUTOENCODER_PROFILES = {
    "mnist": AutoencoderProfile("mnist", (784, 384, 32), ("relu", "relu", "linear")),
    "fmnist": AutoencoderProfile("fmnist", (512, 256, 128), ("relu", "relu", "linear")),
    "kmnist": AutoencoderProfile("kmnist", (512, 384, 32), ("relu", "linear", "linear")),
}

OUTPUT_ACTIVATIONS = ("sigmoid", "softmax")


def build_converting_autoencoder(profile, output_activation="sigmoid", seed=0,
                                 dtype=np.float32) -> Network:
    """Fully-connected 784 -> h1 -> h2 -> h3 -> 784 reconstruction network.

    The penultimate (h3) activation output is the encoder bottleneck; its
    index within the layer list is recorded for activity regularization.
    """
    if isinstance(profile, str):
        try:
            profile = AUTOENCODER_PROFILES[profile]
        except KeyError:
            raise ProfileError(f"no autoencoder profile for dataset {profile!r}") from None
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ProfileError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
    h1, h2, h3 = profile.widths
    trunk = [
        _dense("enc_fc1", FLAT_DIM, h1, seed, dtype), make_activation(profile.activations[0]),
        _dense("enc_fc2", h1, h2, seed, dtype), make_activation(profile.activations[1]),
        _dense("enc_fc3", h2, h3, seed, dtype), make_activation(profile.activations[2]),
        _dense("dec_fc", h3, FLAT_DIM, seed, dtype), make_activation(output_activation),
    ]
    meta = {"arch": "autoencoder", "dataset": profile.dataset_id, "seed": int(seed),
            "output_activation": output_activation, "bottleneck_layer": 5,
            "input": "flat"}
    return Network([Stage(trunk)], meta=meta)


_BUILDERS = {
    "branchy_lenet": lambda meta: build_branchy_lenet(meta.get("seed", 0),
                                                      dataset_id=meta.get("dataset", "")),
    "lenet": lambda meta: build_lenet(meta.get("seed", 0), dataset_id=meta.get("dataset", "")),
    "lightweight": lambda meta: _build_lightweight_arch(meta.get("seed", 0),
                                                        dataset_id=meta.get("dataset", "")),
    "autoencoder": lambda meta: build_converting_autoencoder(
        meta.get("dataset", "mnist"), meta.get("output_activation", "sigmoid"),
        meta.get("seed", 0)),
}


def save_checkpoint(network: Network, path):
    """Write magic, version, JSON metadata, then name/rank/extents/f32 records."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(network.meta, sort_keys=True).encode()
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    for name, tensor in network.params().items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        name_b = name.encode()
        blob += struct.pack("<I", len(name_b)) + name_b
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    tensors = {}
    while off < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise TruncationError(f"{path}: tensor header cut short ({exc})") from None
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise TruncationError(
                f"{path}: tensor {name} needs {nbytes} bytes, {len(raw) - off} left")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count,
                                      offset=off).reshape(shape).copy()
        off += nbytes
    arch = meta.get("arch")
    builder = _BUILDERS.get(arch)
    if builder is None:
        raise FormatError(f"{path}: unknown architecture id {arch!r}")
    net = builder(meta)
    net.meta = meta
    net.load_params(tensors)
    return net


def count_macs(network: Network) -> dict:
    """Per-layer multiply-accumulate counts for one input, plus the total.

    Convolution: H'*W'*C_out*C_in*k*k. Dense: d_in*d_out. Pooling and
    activations contribute no MACs.
    """
    shape = IMAGE_SHAPE if network.meta.get("input", "image") == "image" else (FLAT_DIM,)
    per_layer = {}
    total = 0

    def walk(layers, shape):
        nonlocal total
        for layer in layers:
            if isinstance(layer, Conv2d):
                c, h, w = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                macs = ho * wo * layer.out_channels * layer.in_channels * layer.kernel ** 2
                per_layer[layer.name] = macs
                total += macs
                shape = (layer.out_channels, ho, wo)
            elif isinstance(layer, MaxPool2d):
                c, h, w = shape
                ho = (h + 2 * layer.padding - layer.window) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.window) // layer.stride + 1
                shape = (c, ho, wo)
            elif isinstance(layer, Dense):
                per_layer[layer.name] = layer.d_in * layer.d_out
                total += layer.d_in * layer.d_out
                shape = (layer.d_out,)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
        return shape

    h = shape
    for stage in network.stages:
        h = walk(stage.trunk, h)
        if stage.head:
            walk(stage.head, h)
    return {"per_layer": per_layer, "total": total}


def parameter_count(network: Network) -> int:
    return sum(int(p.size) for p in network.params().values())
