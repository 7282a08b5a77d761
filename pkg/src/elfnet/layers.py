"""Dense tensor layer kernels with explicit forward and backward passes.

All arrays are contiguous row-major numpy arrays with the batch as the
leading dimension. Parameter gradients accumulate additively across
backward calls until `zero_grad` is invoked, so gradient accumulation over
micro-batches works out of the box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DimensionError, StateError


@dataclass
class LayerParams:
    """Weights plus matching gradient and momentum buffers."""

    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)
    vel_weights: np.ndarray = field(init=False)
    vel_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weights = np.zeros_like(self.weights)
        self.vel_bias = np.zeros_like(self.bias)

    def zero_grad(self):
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for numerical stability."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Layer:
    """Common interface: forward caches activations, backward consumes them."""

    params: LayerParams | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flops(self, input_shape: tuple[int, ...]) -> int:
        """FLOPs per example; activations and pooling count as zero."""
        return 0

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.ascontiguousarray(weights)
        bias = np.ascontiguousarray(bias)
        if weights.ndim != 2 or bias.shape != (weights.shape[1],):
            raise DimensionError(
                f"dense weights {weights.shape} incompatible with bias {bias.shape}"
            )
        self.params = LayerParams(weights, bias)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.params.weights.shape[0]:
            raise DimensionError(
                f"dense input {x.shape} incompatible with weights "
                f"{self.params.weights.shape}"
            )
        self._x = x
        return x @ self.params.weights + self.params.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("dense backward called before forward")
        self.params.grad_weights += self._x.T @ grad_out
        self.params.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.params.weights.T

    def flops(self, input_shape):
        m, n = self.params.weights.shape
        return 2 * m * n

    def output_shape(self, input_shape):
        return (self.params.weights.shape[1],)


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"conv output size not integral: input {size}, kernel {k}, "
            f"stride {stride}, pad {pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H_out*W_out, C*k*k) patch matrix."""
    b, c, h, w = x.shape
    h_out = _conv_out_size(h, k, stride, pad)
    w_out = _conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, h_out, w_out, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    # (B, H_out, W_out, C, k, k) -> rows of patches
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h_out * w_out, c * k * k)
    return np.ascontiguousarray(cols)


class Conv2d(Layer):
    """2-D cross-correlation with zero padding and per-channel bias."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0):
        weights = np.ascontiguousarray(weights)
        bias = np.ascontiguousarray(bias)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise DimensionError(f"conv kernel must be (C_out, C_in, k, k), got {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise DimensionError(
                f"conv bias {bias.shape} incompatible with kernel {weights.shape}"
            )
        self.params = LayerParams(weights, bias)
        self.stride = stride
        self.pad = pad
        self._cols = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        c_out, c_in, k, _ = self.params.weights.shape
        if x.ndim != 4 or x.shape[1] != c_in:
            raise DimensionError(
                f"conv input {x.shape} incompatible with kernel "
                f"{self.params.weights.shape}"
            )
        b, _, h, w = x.shape
        h_out = _conv_out_size(h, k, self.stride, self.pad)
        w_out = _conv_out_size(w, k, self.stride, self.pad)
        cols = _im2col(x, k, self.stride, self.pad)
        self._cols = cols
        self._in_shape = x.shape
        w_mat = self.params.weights.reshape(c_out, -1)
        # one large GEMM over all patches beats a batch of small ones
        out = cols.reshape(-1, cols.shape[-1]) @ w_mat.T + self.params.bias
        return np.ascontiguousarray(
            out.reshape(b, h_out, w_out, c_out).transpose(0, 3, 1, 2)
        )

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cols is None:
            raise StateError("conv backward called before forward")
        c_out, c_in, k, _ = self.params.weights.shape
        b, _, h_out, w_out = grad_out.shape
        g = grad_out.transpose(0, 2, 3, 1).reshape(b, h_out * w_out, c_out)
        w_mat = self.params.weights.reshape(c_out, -1)

        g_flat = g.reshape(-1, c_out)
        cols_flat = self._cols.reshape(-1, self._cols.shape[-1])
        self.params.grad_weights += (g_flat.T @ cols_flat).reshape(
            self.params.weights.shape
        )
        self.params.grad_bias += g_flat.sum(axis=0)

        grad_cols = (g_flat @ w_mat).reshape(b, h_out * w_out, -1)
        return _col2im(grad_cols, self._in_shape, k, self.stride, self.pad)

    def flops(self, input_shape):
        c_in, h, w = input_shape
        c_out, _, k, _ = self.params.weights.shape
        h_out = _conv_out_size(h, k, self.stride, self.pad)
        w_out = _conv_out_size(w, k, self.stride, self.pad)
        return 2 * k * k * c_in * c_out * h_out * w_out

    def output_shape(self, input_shape):
        c_in, h, w = input_shape
        c_out, _, k, _ = self.params.weights.shape
        return (
            c_out,
            _conv_out_size(h, k, self.stride, self.pad),
            _conv_out_size(w, k, self.stride, self.pad),
        )


def _col2im(grad_cols: np.ndarray, in_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch gradients back to the (padded) input grid."""
    b, c, h, w = in_shape
    h_out = _conv_out_size(h, k, stride, pad)
    w_out = _conv_out_size(w, k, stride, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    # channel-last accumulator so each tap adds a plain strided view, no copies
    grad_x = np.zeros((b, hp, wp, c), dtype=grad_cols.dtype)
    patches = grad_cols.reshape(b, h_out, w_out, c, k, k)
    for i in range(k):
        for j in range(k):
            grad_x[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += (
                patches[:, :, :, :, i, j]
            )
    grad_x = grad_x.transpose(0, 3, 1, 2)
    if pad:
        grad_x = grad_x[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad_x)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return np.where(self._mask, grad_out, 0.0)

    def output_shape(self, input_shape):
        return input_shape


class GlobalAvgPool(Layer):
    """(B, C, H, W) -> (B, C) global spatial mean per channel."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise DimensionError(f"avg_pool expects (B, C, H, W), got {x.shape}")
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._in_shape is None:
            raise StateError("avg_pool backward called before forward")
        b, c, h, w = self._in_shape
        return np.broadcast_to(
            (grad_out / (h * w))[:, :, None, None], self._in_shape
        ).copy()

    def output_shape(self, input_shape):
        return (input_shape[0],)
