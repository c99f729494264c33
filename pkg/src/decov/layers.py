"""Layers with explicit forward/backward passes.

Image tensors are laid out NHWC (batch, height, width, channels) so that
convolution reduces to a single matrix product over unfolded patches.
Every layer caches what its backward pass needs during ``forward``; calling
``backward`` first raises ``LayerStateError``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, DimensionError, ParameterError, Rng, as_tensor


class LayerStateError(RuntimeError):
    """backward() called without a matching forward()."""


class LabelError(ValueError):
    """Class labels outside [0, num_classes)."""


class Param:
    """A trainable array with its gradient buffer.

    ``decay`` marks whether L2 weight decay applies (weights yes, biases no).
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.decay = decay

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Layer:
    kind = "Layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, training: bool = False, rng: Rng | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self, name):
        value = getattr(self, name, None)
        if value is None:
            raise LayerStateError(f"{self.kind}.backward called before forward")
        return value

    def _check_dout(self, dout, shape):
        if dout.shape != shape:
            raise LayerStateError(
                f"{self.kind}.backward got gradient of shape {dout.shape}, forward produced {shape}"
            )


def fan_in_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    """U[-sqrt(3/n), sqrt(3/n)] with n the fan-in."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"fully connected: input {x.shape}, weight {W.shape}, bias {b.shape} do not conform"
        )
    return x @ W + b


def fc_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients (dx, dW, db) of ``x @ W + b``."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


class FullyConnected(Layer):
    kind = "FullyConnected"

    def __init__(self, n_in: int, n_out: int, rng: Rng, init: str = "uniform",
                 init_std: float = 0.01, name: str = "fc"):
        if init == "uniform":
            W = fan_in_uniform(rng, (n_in, n_out), n_in)
        elif init == "gaussian":
            W = rng.normal((n_in, n_out), 0.0, init_std)
        else:
            raise ParameterError(f"unknown init {init!r}")
        self.W = Param(f"{name}.W", W)
        self.b = Param(f"{name}.b", np.zeros(n_out), decay=False)
        self.input_grad = True
        self._x = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, training=False, rng=None):
        out = fc_forward(x, self.W.value, self.b.value)
        self._x = x
        self._out_shape = out.shape
        return out

    def backward(self, dout):
        x = self._cached("_x")
        self._check_dout(dout, self._out_shape)
        dx, dW, db = fc_backward(dout, x, self.W.value)
        self.W.grad += dW
        self.b.grad += db
        return dx if self.input_grad else None


class ReLU(Layer):
    kind = "ReLU"

    def __init__(self):
        self._mask = None

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        mask = self._cached("_mask")
        self._check_dout(dout, mask.shape)
        return np.where(mask, dout, 0.0)


def dropout_forward(x: np.ndarray, p: float, training: bool, rng: Rng | None):
    """Inverted dropout. Returns (output, mask); mask is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = rng.generator.random(x.shape) >= p
    mask = keep / (1.0 - p)
    return x * mask, mask


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None
        self._shape = None

    def forward(self, x, training=False, rng=None):
        out, self._mask = dropout_forward(x, self.p, training, rng)
        self._shape = x.shape
        return out

    def backward(self, dout):
        shape = self._cached("_shape")
        self._check_dout(dout, shape)
        return dout if self._mask is None else dout * self._mask


class Flatten(Layer):
    kind = "Flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        shape = self._cached("_shape")
        return dout.reshape(shape)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    if k > size + 2 * pad:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation of NHWC ``x`` with filters ``W`` of shape (F, C, kh, kw).

    Returns (out, cols) where cols is the unfolded patch matrix, laid out
    (kh, kw, C) per row, reused by the backward pass.
    """
    if x.ndim != 4 or W.ndim != 4 or x.shape[3] != W.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and filters {W.shape} do not conform")
    F, C, kh, kw = W.shape
    N, H, Wd, _ = x.shape
    Ho = _out_size(H, kh, stride, pad)
    Wo = _out_size(Wd, kw, stride, pad)
    xp = _pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    out = cols @ _filter_matrix(W).T + b
    return out.reshape(N, Ho, Wo, F), cols


def _filter_matrix(W: np.ndarray) -> np.ndarray:
    return W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1)


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape, W: np.ndarray,
                    stride: int = 1, pad: int = 0, input_grad: bool = True):
    """Gradients (dx, dW, db) for ``conv2d_forward``; dx is None when not requested."""
    F, C, kh, kw = W.shape
    N, H, Wd, _ = x_shape
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, F)
    dW = (d2.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not input_grad:
        return None, dW, db
    dxp = np.zeros((N, H + 2 * pad, Wd + 2 * pad, C), dtype=DTYPE)
    taps = np.ascontiguousarray(W.transpose(2, 3, 0, 1))
    for i in range(kh):
        for j in range(kw):
            contrib = (d2 @ taps[i, j]).reshape(N, Ho, Wo, C)
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += contrib
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, dW, db


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: Rng,
                 stride: int = 1, pad: int = 0, init: str = "uniform", init_std: float = 0.01,
                 name: str = "conv"):
        shape = (out_channels, in_channels, kernel, kernel)
        fan_in = in_channels * kernel * kernel
        if init == "uniform":
            W = fan_in_uniform(rng, shape, fan_in)
        elif init == "gaussian":
            W = rng.normal(shape, 0.0, init_std)
        else:
            raise ParameterError(f"unknown init {init!r}")
        self.W = Param(f"{name}.W", W)
        self.b = Param(f"{name}.b", np.zeros(out_channels), decay=False)
        self.stride = stride
        self.pad = pad
        # the first layer of a network never needs d(loss)/d(input)
        self.input_grad = True
        self._cols = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x, training=False, rng=None):
        out, self._cols = conv2d_forward(x, self.W.value, self.b.value, self.stride, self.pad)
        self._x_shape = x.shape
        self._out_shape = out.shape
        return out

    def backward(self, dout):
        cols = self._cached("_cols")
        self._check_dout(dout, self._out_shape)
        dx, dW, db = conv2d_backward(dout, cols, self._x_shape, self.W.value, self.stride,
                                     self.pad, self.input_grad)
        self.W.grad += dW
        self.b.grad += db
        return dx


def _pool_slices(x: np.ndarray, kernel: int, stride: int, Ho: int, Wo: int):
    for p in range(kernel * kernel):
        i, j = divmod(p, kernel)
        yield p, (slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))


def maxpool2d_forward(x: np.ndarray, kernel: int = 2, stride: int = 2):
    """Max pooling over NHWC ``x``. Returns (out, argmax) where argmax is the
    flat in-window index of the winner (lowest index on ties)."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects NHWC input, got shape {x.shape}")
    N, H, W, C = x.shape
    Ho = _out_size(H, kernel, stride, 0)
    Wo = _out_size(W, kernel, stride, 0)
    slices = list(_pool_slices(x, kernel, stride, Ho, Wo))
    out = x[slices[0][1]].copy()
    for _, sl in slices[1:]:
        np.maximum(out, x[sl], out=out)
    idx = np.empty(out.shape, dtype=np.intp)
    # walk backwards so the lowest winning index is written last
    for p, sl in reversed(slices):
        idx[x[sl] == out] = p
    return out, idx


def maxpool2d_backward(dout: np.ndarray, idx: np.ndarray, x_shape, kernel: int = 2, stride: int = 2):
    _, Ho, Wo, _ = dout.shape
    dx = np.zeros(x_shape, dtype=DTYPE)
    for p, sl in _pool_slices(dx, kernel, stride, Ho, Wo):
        dx[sl] += np.where(idx == p, dout, 0.0)
    return dx


class MaxPool2D(Layer):
    kind = "MaxPool2D"

    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel = kernel
        self.stride = stride or kernel
        self._idx = None

    def forward(self, x, training=False, rng=None):
        out, self._idx = maxpool2d_forward(x, self.kernel, self.stride)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        idx = self._cached("_idx")
        self._check_dout(dout, idx.shape)
        return maxpool2d_backward(dout, idx, self._x_shape, self.kernel, self.stride)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels)
    N, k = logits.shape
    if labels.shape != (N,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if N and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(logsum - z[rows, labels]))
    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / N


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared error summed over features, averaged over the batch.

    For a 784-pixel image whose every pixel is off by 1 the loss is 784.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} and target {target.shape} differ")
    N = pred.shape[0]
    diff = (pred - target).reshape(N, -1)
    loss = float(np.sum(diff * diff) / N)
    return loss, (2.0 / N) * (pred - target)
