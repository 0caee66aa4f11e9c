"""Dense (height, width, channel) arrays and their hand-written gradients.

A "tensor" throughout the package is a plain ``numpy.ndarray`` of rank 3
laid out as (height, width, channel). There is no batch axis; callers loop
over samples. Every forward op here has a matching ``*_backward`` that maps
an output cotangent to input cotangents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 3:
        raise ConfigError(f"{name} must be a rank-3 (h, w, c) array")
    if min(x.shape) < 1:
        raise ConfigError(f"{name} has an empty axis: {x.shape}")
    return x


@dataclass(eq=False)
class ConvKernel:
    """Convolution weights laid out (kh, kw, in_channels, out_channels) plus bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ConfigError("kernel weights must be rank 4 (kh, kw, in, out)")
        kh, kw, _, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel extent must be odd, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ConfigError(f"bias shape {self.bias.shape} != ({cout},)")

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @classmethod
    def zeros(cls, kh, kw, in_channels, out_channels, dtype=np.float64) -> "ConvKernel":
        return cls(
            np.zeros((kh, kw, in_channels, out_channels), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
        )

    @classmethod
    def glorot(cls, kh, kw, in_channels, out_channels, rng: np.random.Generator,
               dtype=np.float64) -> "ConvKernel":
        """Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias."""
        fan_in = kh * kw * in_channels
        fan_out = kh * kw * out_channels
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(kh, kw, in_channels, out_channels))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    def zeros_like(self) -> "ConvKernel":
        return ConvKernel(np.zeros_like(self.weights), np.zeros_like(self.bias))

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy())

    def astype(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))

    def add_(self, other: "ConvKernel") -> "ConvKernel":
        self.weights += other.weights
        self.bias += other.bias
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


def _check_conv(x: np.ndarray, kernel: ConvKernel) -> None:
    check_tensor(x, "conv input")
    if x.shape[2] != kernel.in_channels:
        raise ConfigError(
            f"conv input has {x.shape[2]} channels, kernel expects {kernel.in_channels}"
        )


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows are output pixels, columns are (dy, dx, channel) patch entries."""
    h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(h * w, c)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((h + kh - 1, w + kw - 1, c), dtype=x.dtype)
    xp[ph:ph + h, pw:pw + w] = x
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (h, w, c, kh, kw)
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * c)


def _input_grad(grad_out: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # stride-1 "same" correlation transposes to a correlation of grad_out
    # with the spatially flipped kernel, in/out channels swapped
    h, w, cout = grad_out.shape
    kh, kw, cin, _ = weights.shape
    if kh == 1 and kw == 1:
        return (grad_out.reshape(h * w, cout) @ weights.reshape(cin, cout).T).reshape(h, w, cin)
    flipped = weights[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
    return (_im2col(grad_out, kh, kw) @ flipped).reshape(h, w, cin)


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding, plus bias."""
    _check_conv(x, kernel)
    h, w, _ = x.shape
    cols = _im2col(x, kernel.kh, kernel.kw)
    out = cols @ kernel.weights.reshape(-1, kernel.out_channels) + kernel.bias
    return out.reshape(h, w, kernel.out_channels)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray
                    ) -> tuple[np.ndarray, ConvKernel]:
    """Return ``(grad_input, grad_kernel)`` for ``conv2d(x, kernel)``."""
    _check_conv(x, kernel)
    h, w, _ = x.shape
    cout = kernel.out_channels
    if grad_out.shape != (h, w, cout):
        raise ConfigError(f"grad_out shape {grad_out.shape} != {(h, w, cout)}")
    g = grad_out.reshape(h * w, cout)
    cols = _im2col(x, kernel.kh, kernel.kw)
    grad_w = (cols.T @ g).reshape(kernel.weights.shape)
    return _input_grad(grad_out, kernel.weights), ConvKernel(grad_w, g.sum(axis=0))


def _part_offsets(parts, kernel):
    offsets = [0]
    for p in parts:
        check_tensor(p, "conv input part")
        if p.shape[:2] != parts[0].shape[:2]:
            raise ConfigError(f"spatial mismatch in conv parts: {p.shape[:2]} vs {parts[0].shape[:2]}")
        offsets.append(offsets[-1] + p.shape[2])
    if offsets[-1] != kernel.in_channels:
        raise ConfigError(
            f"parts carry {offsets[-1]} channels, kernel expects {kernel.in_channels}"
        )
    return offsets


def conv2d_concat_forward(parts: Sequence[np.ndarray], kernel: ConvKernel
                          ) -> tuple[np.ndarray, list[np.ndarray]]:
    """``conv2d(concat_channels(parts), kernel)`` evaluated part by part.

    Partial products are summed in list order and the bias is added last,
    so a zeroed weight block adds exact zeros and the result is bitwise
    equal to convolving only the remaining parts. Also returns the im2col
    matrices so the backward pass need not rebuild them.
    """
    offsets = _part_offsets(parts, kernel)
    kh, kw, cout = kernel.kh, kernel.kw, kernel.out_channels
    out = None
    cols = []
    for k, p in enumerate(parts):
        ck = _im2col(p, kh, kw)
        wk = kernel.weights[:, :, offsets[k]:offsets[k + 1]].reshape(-1, cout)
        term = ck @ wk
        out = term if out is None else out + term
        cols.append(ck)
    out = out + kernel.bias
    return out.reshape(parts[0].shape[:2] + (cout,)), cols


def conv2d_concat(parts: Sequence[np.ndarray], kernel: ConvKernel) -> np.ndarray:
    return conv2d_concat_forward(parts, kernel)[0]


def conv2d_concat_backward(parts: Sequence[np.ndarray], kernel: ConvKernel,
                           grad_out: np.ndarray, cols: Optional[list] = None
                           ) -> tuple[list[np.ndarray], ConvKernel]:
    """Return ``(grad_parts, grad_kernel)`` for :func:`conv2d_concat`."""
    offsets = _part_offsets(parts, kernel)
    h, w = parts[0].shape[:2]
    cout = kernel.out_channels
    if grad_out.shape != (h, w, cout):
        raise ConfigError(f"grad_out shape {grad_out.shape} != {(h, w, cout)}")
    g = grad_out.reshape(h * w, cout)
    grad_w = np.empty_like(kernel.weights)
    for k, p in enumerate(parts):
        ck = cols[k] if cols is not None else _im2col(p, kernel.kh, kernel.kw)
        grad_w[:, :, offsets[k]:offsets[k + 1]] = (ck.T @ g).reshape(
            kernel.kh, kernel.kw, p.shape[2], cout)
    grad_x = _input_grad(grad_out, kernel.weights)
    grads = [grad_x[:, :, offsets[k]:offsets[k + 1]] for k in range(len(parts))]
    return grads, ConvKernel(grad_w, g.sum(axis=0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Cotangent through the logistic function, given its output ``y``."""
    return grad * y * (1.0 - y)


def tanh_act(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Cotangent through tanh, given its output ``y``."""
    return grad * (1.0 - y * y)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ConfigError("concat_channels needs at least one part")
    hw = parts[0].shape[:2]
    for p in parts:
        check_tensor(p, "concat part")
        if p.shape[:2] != hw:
            raise ConfigError(f"spatial mismatch in concat: {p.shape[:2]} vs {hw}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=2)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels`; also its backward."""
    if sum(sizes) != x.shape[2]:
        raise ConfigError(f"split sizes {list(sizes)} do not sum to {x.shape[2]}")
    offsets = np.cumsum(sizes)[:-1]
    return np.split(x, offsets, axis=2)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a * b


def elementwise_mul_backward(a, b, grad) -> tuple[np.ndarray, np.ndarray]:
    return grad * b, grad * a


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return a + b


def elementwise_add_backward(grad) -> tuple[np.ndarray, np.ndarray]:
    return grad, grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place one element at a time and restored exactly,
    so ``f`` may either use its argument or close over the same array.
    The difference is taken in the widest float type so an extended-precision
    ``f`` keeps its extra digits.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite_diff_grad needs a contiguous array")
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = np.longdouble(f(x))
        flat[i] = orig - eps
        fm = np.longdouble(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * np.longdouble(eps))
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
