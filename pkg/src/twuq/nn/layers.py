"""Array layers with explicit forward/backward passes.

Activations use a channel-first ``(C, N, H, W)`` layout so that the im2col
buffers of both passes reshape without copies and every convolution runs as
one dense matrix product over the whole batch. Each layer caches what its
backward pass needs, so one instance handles one position in the network.
Computations run in the dtype of the parameters (float32 for training,
float64 for gradient verification).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Parameter",
    "Conv2d",
    "ConvTranspose2d",
    "MaxPool2d",
    "ReLU",
    "Dropout",
    "concat_channels",
    "split_channels",
    "masked_mse_loss",
]


class Parameter:
    """A trainable tensor with its gradient accumulator."""

    __slots__ = ("data", "grad", "name", "is_kernel")

    def __init__(self, data: np.ndarray, name: str, is_kernel: bool = False):
        self.data = data
        self.grad = np.zeros_like(data)
        self.name = name
        self.is_kernel = is_kernel

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, n, h, w = x.shape
    out = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p] = x
    return out


def _im2col(x_padded: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (C, N, Hp, Wp) -> (C*k*k, N*h*w); the copy is cache-friendly because
    # the batch/pixel axes stay innermost.
    c, n = x_padded.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(2, 3))
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * h * w)


class Conv2d:
    """Odd-kernel convolution with unit stride and 'same' zero padding."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        name: str,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if kernel_size % 2 != 1:
            raise ValueError("same-padding convolution needs an odd kernel")
        fan_in = in_channels * kernel_size * kernel_size
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Parameter(w.astype(dtype), f"{name}/w", is_kernel=True)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}/b")
        self.k = kernel_size
        self._cols = None
        self._x_shape = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, n, h, w = x.shape
        k = self.k
        self._x_shape = x.shape
        cols = _im2col(_pad_spatial(x, k // 2), k, h, w)
        self._cols = cols
        o = self.weight.data.shape[0]
        out = (self.weight.data.reshape(o, c * k * k) @ cols).reshape(o, n, h, w)
        out += self.bias.data[:, np.newaxis, np.newaxis, np.newaxis]
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        c, n, h, w = self._x_shape
        k = self.k
        o = grad.shape[0]
        g2 = grad.reshape(o, n * h * w)
        self.bias.grad += grad.sum(axis=(1, 2, 3))
        self.weight.grad += (g2 @ self._cols.T).reshape(self.weight.data.shape)
        # Input gradient is the correlation of the padded output gradient
        # with the flipped, channel-transposed kernel: one more dense GEMM.
        colsg = _im2col(_pad_spatial(grad, k // 2), k, h, w)
        wflip = self.weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = np.ascontiguousarray(wflip).reshape(c, o * k * k) @ colsg
        return dx.reshape(c, n, h, w)


class ConvTranspose2d:
    """Kernel-2, stride-2 transposed convolution (exact 2x upsampling)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        name: str,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        # Stride equals kernel size, so each output pixel sees in_channels taps.
        limit = np.sqrt(6.0 / in_channels)
        w = rng.uniform(-limit, limit, (in_channels, out_channels, 2, 2))
        self.weight = Parameter(w.astype(dtype), f"{name}/w", is_kernel=True)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}/b")
        self._x2 = None
        self._x_shape = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, n, h, w = x.shape
        x2 = x.reshape(c, n * h * w)
        self._x2 = x2
        self._x_shape = x.shape
        o = self.weight.data.shape[1]
        cols = self.weight.data.reshape(c, o * 4).T @ x2
        cr = cols.reshape(o, 2, 2, n, h, w)
        out = np.empty((o, n, 2 * h, 2 * w), dtype=x.dtype)
        for di in range(2):
            for dj in range(2):
                out[:, :, di::2, dj::2] = cr[:, di, dj]
        out += self.bias.data[:, np.newaxis, np.newaxis, np.newaxis]
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        c, n, h, w = self._x_shape
        o = grad.shape[0]
        gcols = np.empty((o, 2, 2, n, h, w), dtype=grad.dtype)
        for di in range(2):
            for dj in range(2):
                gcols[:, di, dj] = grad[:, :, di::2, dj::2]
        g2 = gcols.reshape(o * 4, n * h * w)
        self.weight.grad += (self._x2 @ g2.T).reshape(self.weight.data.shape)
        self.bias.grad += grad.sum(axis=(1, 2, 3))
        dx2 = self.weight.data.reshape(c, o * 4) @ g2
        return dx2.reshape(c, n, h, w)


class MaxPool2d:
    """2x2 max pooling; ties resolve to the first position, deterministically."""

    def __init__(self):
        self._idx = None
        self._in_shape = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, n, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial size must be even to pool, got {h}x{w}")
        self._in_shape = x.shape
        xr = (
            x.reshape(c, n, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(c, n, h // 2, w // 2, 4)
        )
        self._idx = xr.argmax(axis=-1)
        return np.take_along_axis(xr, self._idx[..., np.newaxis], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        c, n, h, w = self._in_shape
        scattered = np.zeros((c, n, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(scattered, self._idx[..., np.newaxis], grad[..., np.newaxis], axis=-1)
        return (
            scattered.reshape(c, n, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(c, n, h, w)
        )


class ReLU:
    def __init__(self):
        self._active = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._active = x > 0
        return np.where(self._active, x, x.dtype.type(0))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return np.where(self._active, grad, grad.dtype.type(0))


class Dropout:
    """Inverted dropout; active only when a generator is supplied."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None or self.rate == 0.0:
            self._mask = None
            return x
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        self._mask = keep / x.dtype.type(1.0 - self.rate)
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return grad
        return grad * self._mask


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b], axis=0)


def split_channels(grad: np.ndarray, first_channels: int) -> tuple[np.ndarray, np.ndarray]:
    return grad[:first_channels], grad[first_channels:]


def masked_mse_loss(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared residual over masked pixels, with its gradient.

    ``pred`` and ``target`` are ``(N, H, W)`` (or a single image); ``mask``
    broadcasts over the batch. Returns ``(loss, dloss/dpred)``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask_b = np.broadcast_to(mask, pred.shape)
    count = int(mask_b.sum())
    if count == 0:
        raise ValueError("mask selects no pixels")
    resid = np.where(mask_b, pred - target, 0.0)
    loss = float((resid * resid).sum() / count)
    grad = (2.0 / count) * resid
    return loss, grad.astype(pred.dtype)
