"""Dense-tensor layer library: conv / pool / dense / activations with explicit backward passes.

Tensors are plain numpy arrays, row-major, float32 by default (float64 for
gradient-check mode). Convolution is cross-correlation (no kernel flip) and is
implemented as a patch-gather (im2col) followed by a single matmul; the gather
indices are cached per input geometry so repeated calls do no index arithmetic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent: floor((size + 2*padding - kernel) / stride) + 1."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid conv/pool geometry k={kernel} s={stride} p={padding}")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    return span // stride + 1


_COL_INDEX_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
_ROW_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(h: int, w: int, kh: int, kw: int, stride: int):
    """Row/col gather indices of shape (kh*kw, H'*W') into the padded image."""
    key = (h, w, kh, kw, stride)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    ho = conv_out_extent(h, kh, stride, 0)
    wo = conv_out_extent(w, kw, stride, 0)
    i0 = np.repeat(np.arange(kh), kw).reshape(-1, 1)
    j0 = np.tile(np.arange(kw), kh).reshape(-1, 1)
    i1 = stride * np.repeat(np.arange(ho), wo).reshape(1, -1)
    j1 = stride * np.tile(np.arange(wo), ho).reshape(1, -1)
    out = (i0 + i1, j0 + j1)
    _COL_INDEX_CACHE[key] = out
    return out


def _row_indices(h: int, w: int, c: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Linear gather indices of shape (H'*W', C*kh*kw) into a flattened padded
    image, laid out so the gathered matrix feeds one patches-by-filters matmul."""
    key = (h, w, c, kh, kw, stride)
    hit = _ROW_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    ii, jj = _col_indices(h, w, kh, kw, stride)
    plane = (ii * w + jj).T                                    # (F, kh*kw)
    lin = (np.arange(c) * (h * w))[None, :, None] + plane[:, None, :]
    lin = np.ascontiguousarray(lin.reshape(plane.shape[0], c * kh * kw))
    _ROW_INDEX_CACHE[key] = lin
    return lin


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    buf[:, :, padding:padding + h, padding:padding + w] = x
    return buf


def _as_batch(x: np.ndarray, rank: int):
    """Promote a single sample to a batch of one; report whether it was promoted."""
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N, H'*W', C*kh*kw) patch-rows matrix of the padded input."""
    xp = _pad_nchw(x, padding)
    n, c, hp, wp = xp.shape
    lin = _row_indices(hp, wp, c, kh, kw, stride)
    # np.take keeps the result C-contiguous (plain fancy indexing may not),
    # so downstream reshapes stay views
    return np.take(xp.reshape(n, c * hp * wp), lin, axis=1)


def col2im(rows: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch rows back onto the (unpadded) input; adjoint of im2col.

    Accumulates one strided slab per kernel offset instead of an unbuffered
    element scatter; overlapping windows sum correctly.
    """
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = conv_out_extent(hp, kh, stride, 0)
    wo = conv_out_extent(wp, kw, stride, 0)
    out = np.zeros((n, c, hp, wp), dtype=rows.dtype)
    # one pass to (N, C, kh, kw, Ho, Wo) so the slab adds below read contiguously
    patches = np.ascontiguousarray(
        rows.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += \
                patches[:, :, dy, dx]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d_forward(x, weights, bias, stride=1, padding=0, return_cache=False):
    """Cross-correlate x (C,H,W or N,C,H,W) with weights (C_out,C_in,kH,kW) plus bias.

    Output extent per axis is floor((in + 2p - k)/s) + 1.
    """
    xb, single = _as_batch(np.asarray(x), 3)
    w = np.asarray(weights)
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be rank 4, got {w.shape}")
    cout, cin, kh, kw = w.shape
    if xb.shape[1] != cin:
        raise ShapeError(f"input has {xb.shape[1]} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    n, _, h, wd = xb.shape
    ho = conv_out_extent(h, kh, stride, padding)
    wo = conv_out_extent(wd, kw, stride, padding)
    rows = im2col(xb, kh, kw, stride, padding)   # (N, Ho*Wo, C*k*k)
    wmat = w.reshape(cout, -1)
    flat = rows.reshape(n * ho * wo, -1) @ wmat.T
    out = flat.reshape(n, ho * wo, cout).transpose(0, 2, 1) + bias[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    if single:
        out = out[0]
    if return_cache:
        return out, (xb.shape, rows, w, stride, padding, single)
    return out


def conv2d_backward(grad_out, cache, input_grad=True):
    """Gradients of a conv forward: (grad_input, grad_weights, grad_bias).

    input_grad=False skips the input gradient (for a network's first layer).
    """
    if cache is None:
        raise StateError("conv2d_backward called without a cached forward")
    x_shape, rows, w, stride, padding, single = cache
    cout, cin, kh, kw = w.shape
    gb, _ = _as_batch(np.asarray(grad_out), 3)
    n = x_shape[0]
    grad_bias = gb.sum(axis=(0, 2, 3))
    g_rows = np.ascontiguousarray(
        gb.reshape(n, cout, -1).transpose(0, 2, 1)).reshape(-1, cout)  # (N*F, C_out)
    flat_rows = rows.reshape(g_rows.shape[0], -1)
    grad_w = (g_rows.T @ flat_rows).reshape(w.shape)
    if not input_grad:
        return None, grad_w, grad_bias
    wmat = w.reshape(cout, -1)
    grad_rows = (g_rows @ wmat).reshape(rows.shape)  # (N, F, C*k*k)
    grad_x = col2im(grad_rows, x_shape, kh, kw, stride, padding)
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_bias


def maxpool2d_forward(x, window, stride, padding=0, return_cache=False):
    """Max over window x window patches. Ties resolve to the lowest linear index.

    Window cells that fall outside the unpadded input never win (padding cells
    are treated as -inf sentinels, i.e. the window truncates to valid elements).
    """
    if window < 1 or stride < 1:
        raise ShapeError(f"invalid pool geometry w={window} s={stride}")
    xb, single = _as_batch(np.asarray(x), 3)
    n, c, h, w = xb.shape
    ho = conv_out_extent(h, window, stride, padding)
    wo = conv_out_extent(w, window, stride, padding)
    if padding:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=xb.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xb
    else:
        xp = xb
    ii, jj = _col_indices(xp.shape[2], xp.shape[3], window, window, stride)
    patches = xp[:, :, ii, jj]                   # (N, C, w*w, Ho*Wo)
    arg = patches.argmax(axis=2)                 # first max wins -> lowest linear index
    out = np.take_along_axis(patches, arg[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(n, c, ho, wo)
    # map window-local argmax to linear indices into the unpadded input
    rows = ii[arg, np.arange(arg.shape[-1])] - padding
    cols_ = jj[arg, np.arange(arg.shape[-1])] - padding
    argmax_linear = (rows * w + cols_).reshape(n, c, ho, wo)
    if single:
        out, argmax_linear = out[0], argmax_linear[0]
    if return_cache:
        return out, argmax_linear, (xb.shape, single, stride < window)
    return out, argmax_linear


def maxpool2d_backward(grad_out, argmax_linear, cache):
    """Route each output-cell gradient to the input cell that produced the max."""
    if cache is None:
        raise StateError("maxpool2d_backward called without a cached forward")
    x_shape, single, overlapping = cache
    gb, _ = _as_batch(np.asarray(grad_out), 3)
    am, _ = _as_batch(np.asarray(argmax_linear), 3)
    n, c, h, w = x_shape
    grad = np.zeros((n, c, h * w), dtype=gb.dtype)
    flatg = gb.reshape(n, c, -1)
    flata = am.reshape(n, c, -1)
    if overlapping:
        # windows can share cells: needs a true scatter-add
        np.add.at(grad, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flata),
                  flatg)
    else:
        np.put_along_axis(grad, flata, flatg, axis=2)
    grad = grad.reshape(x_shape)
    if single:
        grad = grad[0]
    return grad


def dense_forward(x, weights, bias, return_cache=False):
    """out_i = sum_j W[i,j] x[j] + b[i]; x may be (d_in,) or (N, d_in)."""
    xb, single = _as_batch(np.asarray(x), 1)
    w = np.asarray(weights)
    if w.ndim != 2 or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {xb.shape} incompatible with weights {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({w.shape[0]},)")
    out = xb @ w.T + bias
    if single:
        out = out[0]
    if return_cache:
        return out, (xb, w, single)
    return out


def dense_backward(grad_out, cache):
    if cache is None:
        raise StateError("dense_backward called without a cached forward")
    xb, w, single = cache
    gb, _ = _as_batch(np.asarray(grad_out), 1)
    grad_w = gb.T @ xb
    grad_b = gb.sum(axis=0)
    grad_x = gb @ w
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign to avoid exp overflow on large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    """Max-shifted softmax; stable for inputs of any finite magnitude."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def activation_forward(kind, x):
    if kind == "relu":
        return relu(x)
    if kind == "linear":
        return np.asarray(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


class Layer:
    """Forward/backward node. Parameters and their gradients are name-addressed."""

    name = ""

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, name, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng=None, dtype=np.float32, input_grad=True):
        self.name = name
        self.stride, self.padding = stride, padding
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.input_grad = input_grad
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.w = glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out, dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, train=False):
        if train:
            out, self._cache = conv2d_forward(x, self.w, self.b, self.stride, self.padding,
                                              return_cache=True)
            return out
        return conv2d_forward(x, self.w, self.b, self.stride, self.padding)

    def backward(self, grad_out):
        grad_x, self.gw, self.gb = conv2d_backward(grad_out, self._cache,
                                                   input_grad=self.input_grad)
        return grad_x

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.gw, f"{self.name}.b": self.gb}

    def set_params(self, mapping):
        self.w = mapping[f"{self.name}.w"]
        self.b = mapping[f"{self.name}.b"]


class MaxPool2d(Layer):
    def __init__(self, window=2, stride=2, padding=0):
        self.window, self.stride, self.padding = window, stride, padding
        self._argmax = None
        self._cache = None

    def forward(self, x, train=False):
        out, argmax, cache = maxpool2d_forward(x, self.window, self.stride, self.padding,
                                               return_cache=True)
        if train:
            self._argmax, self._cache = argmax, cache
        return out

    def backward(self, grad_out):
        return maxpool2d_backward(grad_out, self._argmax, self._cache)


class Dense(Layer):
    def __init__(self, name, d_in, d_out, rng=None, dtype=np.float32):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        rng = rng or np.random.default_rng(0)
        self.w = glorot_uniform(rng, (d_out, d_in), d_in, d_out, dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x, train=False):
        if train:
            out, self._cache = dense_forward(x, self.w, self.b, return_cache=True)
            return out
        return dense_forward(x, self.w, self.b)

    def backward(self, grad_out):
        grad_x, self.gw, self.gb = dense_backward(grad_out, self._cache)
        return grad_x

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.gw, f"{self.name}.b": self.gb}

    def set_params(self, mapping):
        self.w = mapping[f"{self.name}.w"]
        self.b = mapping[f"{self.name}.b"]


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        if train:
            self._shape = x.shape
        if x.ndim == 3:          # single sample
            return x.reshape(-1)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        if self._shape is None:
            raise StateError("Flatten.backward before forward")
        return grad_out.reshape(self._shape)


class Relu(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
            return np.where(self._mask, x, 0)
        return np.maximum(x, 0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("Relu.backward before forward")
        return grad_out * self._mask


class Sigmoid(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x, train=False):
        out = sigmoid(x)
        if train:
            self._out = out
        return out

    def backward(self, grad_out):
        if self._out is None:
            raise StateError("Sigmoid.backward before forward")
        return grad_out * self._out * (1.0 - self._out)


class Identity(Layer):
    def forward(self, x, train=False):
        return x

    def backward(self, grad_out):
        return grad_out


class Softmax(Layer):
    """Softmax over the last axis. backward applies the full Jacobian-vector
    product; cross-entropy training bypasses it with the fused logits gradient."""

    def __init__(self):
        self._out = None

    def forward(self, x, train=False):
        out = softmax(x, axis=-1)
        if train:
            self._out = out
        return out

    def backward(self, grad_out):
        if self._out is None:
            raise StateError("Softmax.backward before forward")
        y = self._out
        dot = np.sum(grad_out * y, axis=-1, keepdims=True)
        return y * (grad_out - dot)


ACTIVATION_LAYERS = {"relu": Relu, "linear": Identity, "sigmoid": Sigmoid, "softmax": Softmax}


def make_activation(kind) -> Layer:
    try:
        return ACTIVATION_LAYERS[kind]()
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None
