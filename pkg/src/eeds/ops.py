"""Differentiable primitives: convolution, transposed convolution, ReLU,
elementwise add, channel concat and the Euclidean loss.

Every op is a pure function on ``numpy`` arrays with an explicit backward.
Convolution uses a strided-window gather (im2col) feeding a single BLAS
contraction; the transposed convolution is the backward-data pass of a
strided convolution, so both share one kernel family.

Weight layouts:

* conv: ``(C_out, C_in, k, k)``
* deconv: ``(C_in, C_out, k, k)`` (the adjoint orientation)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, check_tensor, concat_channels, split_channels


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output: (size={size} + 2*{pad} - k={k}) / stride={stride}"
        )
    return span // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size - 1) * stride + k - 2 * pad
    if out < 1:
        raise ValueError(
            f"non-positive deconv output {out} for size={size}, k={k}, stride={stride}, pad={pad}"
        )
    return out


def _pad_or_crop(x: np.ndarray, amount: int) -> np.ndarray:
    if amount > 0:
        return np.pad(x, ((0, 0), (0, 0), (amount, amount), (amount, amount)))
    if amount < 0:
        c = -amount
        return x[:, :, c:-c, c:-c]
    return x


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) view, no copy
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        v = v[:, :, ::stride, ::stride]
    return v


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv input patches into a ``(C * k * k, N * H' * W')`` matrix."""
    n, c = x.shape[:2]
    if k == 1 and stride == 1 and pad == 0:
        cols = x.transpose(1, 0, 2, 3) if n > 1 else x[0]
        return np.ascontiguousarray(cols).reshape(c, -1)
    win = _windows(_pad_or_crop(x, pad), k, stride)
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col` back onto an input of ``shape``."""
    n, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if k == 1 and stride == 1 and pad == 0:
        return np.ascontiguousarray(cols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u: u + stride * ho: stride, v: v + stride * wo: stride] += (
                cols[:, u, v].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad: pad + h, pad: pad + w]
    return np.ascontiguousarray(out)


def _rows_to_nchw(mat: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    # (C, N * H * W) -> (N, C, H, W)
    c = mat.shape[0]
    return np.ascontiguousarray(mat.reshape(c, n, ho, wo).transpose(1, 0, 2, 3))


def _nchw_to_rows(t: np.ndarray) -> np.ndarray:
    n, c = t.shape[:2]
    if n == 1:
        return t.reshape(c, -1)
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(c, -1)


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, weight, stride, pad):
    check_tensor(x, "conv input")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv kernel must be square, got {weight.shape}")
    if x.shape[1] != c_in:
        raise ValueError(f"conv channel mismatch: input C={x.shape[1]}, weight C_in={c_in}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    return (conv_output_size(x.shape[2], k, stride, pad),
            conv_output_size(x.shape[3], k, stride, pad))


def conv2d_forward(x, weight, bias, stride: int = 1, pad: int = 0, cols=None) -> np.ndarray:
    """Cross-correlation ``out = bias + sum(w * x_padded)`` with square kernels.

    ``cols`` may carry a precomputed ``im2col(x, k, stride, pad)``.
    """
    ho, wo = _check_conv(x, weight, stride, pad)
    c_out, _, k, _ = weight.shape
    if cols is None:
        cols = im2col(x, k, stride, pad)
    out = weight.reshape(c_out, -1) @ cols
    out += bias.reshape(-1, 1).astype(out.dtype, copy=False)
    return _rows_to_nchw(out, x.shape[0], ho, wo)


def conv2d_backward_data(grad_out, weight, input_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` with respect to its input."""
    c_out, c_in, k, _ = weight.shape
    cols = weight.reshape(c_out, -1).T @ _nchw_to_rows(grad_out)
    return col2im(cols, input_shape, k, stride, pad)


def conv2d_backward(grad_out, x, weight, stride: int = 1, pad: int = 0, cols=None):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    c_out, c_in, k, _ = weight.shape
    ho = conv_output_size(x.shape[2], k, stride, pad)
    wo = conv_output_size(x.shape[3], k, stride, pad)
    if grad_out.shape != (x.shape[0], c_out, ho, wo):
        raise ValueError(
            f"conv grad_out shape {grad_out.shape} inconsistent with forward "
            f"{(x.shape[0], c_out, ho, wo)}"
        )
    if cols is None:
        cols = im2col(x, k, stride, pad)
    g = _nchw_to_rows(grad_out)
    grad_b = g.sum(axis=1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_x = col2im(weight.reshape(c_out, -1).T @ g, x.shape, k, stride, pad)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# transposed convolution


def deconv2d_forward(x, weight, bias, stride: int, pad: int) -> np.ndarray:
    """Transposed convolution, output size ``(H - 1) * stride + k - 2 * pad``.

    Computed as the backward-data pass of a stride-``s`` convolution whose
    weights are ``weight`` read in conv layout.
    """
    check_tensor(x, "deconv input")
    c_in, c_out, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"deconv kernel must be square, got {weight.shape}")
    if x.shape[1] != c_in:
        raise ValueError(f"deconv channel mismatch: input C={x.shape[1]}, weight C_in={c_in}")
    if stride < 1 or pad < 0 or k <= pad:
        raise ValueError(f"invalid deconv stride={stride}, k={k}, pad={pad}")
    ho = deconv_output_size(x.shape[2], k, stride, pad)
    wo = deconv_output_size(x.shape[3], k, stride, pad)
    out = conv2d_backward_data(x, weight, (x.shape[0], c_out, ho, wo), stride, pad)
    out += bias.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)
    return out


def deconv2d_backward(grad_out, x, weight, stride: int, pad: int):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`deconv2d_forward`.

    The data gradient is a plain stride-``s`` convolution of ``grad_out``.
    """
    c_in, c_out, k, _ = weight.shape
    ho = deconv_output_size(x.shape[2], k, stride, pad)
    wo = deconv_output_size(x.shape[3], k, stride, pad)
    if grad_out.shape != (x.shape[0], c_out, ho, wo):
        raise ValueError(
            f"deconv grad_out shape {grad_out.shape} inconsistent with forward "
            f"{(x.shape[0], c_out, ho, wo)}"
        )
    grad_b = grad_out.sum(axis=(0, 2, 3))
    cols = im2col(grad_out, k, stride, pad)
    grad_x = conv2d_forward(grad_out, weight, np.zeros(c_in, dtype=grad_out.dtype),
                            stride, pad, cols=cols)
    grad_w = (_nchw_to_rows(x) @ cols.T).reshape(weight.shape)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# pointwise and structural ops


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def euclidean_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Half squared L2 error summed over elements and averaged over the batch.

    Returns ``(loss, grad_pred)`` with ``grad_pred = (pred - target) / N``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = 0.5 * float(np.sum(diff * diff)) / n
    return loss, (diff / n).astype(pred.dtype)


def crop_forward(x: np.ndarray, amount: int) -> np.ndarray:
    # drops ``amount`` trailing rows and columns
    if amount == 0:
        return x
    return x[:, :, :-amount, :-amount]


def crop_backward(grad_out: np.ndarray, amount: int) -> np.ndarray:
    if amount == 0:
        return grad_out
    return np.pad(grad_out, ((0, 0), (0, 0), (0, amount), (0, amount)))


# --------------------------------------------------------------------------
# layers and tape


@dataclass(eq=False)
class LayerParams:
    """Learnable weights of one conv or deconv layer plus its geometry."""

    weight: np.ndarray
    bias: np.ndarray
    kind: str = "conv"
    stride: int = 1
    pad: int = 0
    name: str = ""
    grad_w: np.ndarray = field(init=False, repr=False)
    grad_b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        k = self.weight.shape[2]
        if self.weight.ndim != 4 or self.weight.shape[3] != k or k < 1:
            raise ValueError(f"layer {self.name}: weights must be (A, B, k, k), got {self.weight.shape}")
        if self.kind == "deconv" and k <= self.pad:
            raise ValueError(f"layer {self.name}: deconv needs k > pad, got k={k}, pad={self.pad}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"layer {self.name}: bias shape {self.bias.shape} != ({self.out_channels},)")
        self.zero_grad()

    @classmethod
    def create(cls, kind, c_in, c_out, k, stride=1, pad=0, name="", dtype=DTYPE):
        shape = (c_out, c_in, k, k) if kind == "conv" else (c_in, c_out, k, k)
        return cls(np.zeros(shape, dtype), np.zeros(c_out, dtype), kind, stride, pad, name)

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] if self.kind == "conv" else self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0] if self.kind == "conv" else self.weight.shape[1]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self):
        self.grad_w = np.zeros_like(self.weight)
        self.grad_b = np.zeros_like(self.bias)

    def forward(self, x, cols=None):
        if self.kind == "conv":
            return conv2d_forward(x, self.weight, self.bias, self.stride, self.pad, cols)
        return deconv2d_forward(x, self.weight, self.bias, self.stride, self.pad)

    def im2col(self, x):
        """Patch matrix reusable by ``forward`` and ``backward`` (conv only)."""
        return im2col(x, self.kernel, self.stride, self.pad) if self.kind == "conv" else None

    def backward(self, grad_out, x, accumulate=True, cols=None):
        if self.kind == "conv":
            grad_x, grad_w, grad_b = conv2d_backward(grad_out, x, self.weight, self.stride,
                                                     self.pad, cols)
        else:
            grad_x, grad_w, grad_b = deconv2d_backward(grad_out, x, self.weight, self.stride,
                                                       self.pad)
        if accumulate:
            self.grad_w += grad_w.astype(self.grad_w.dtype, copy=False)
            self.grad_b += grad_b.astype(self.grad_b.dtype, copy=False)
        return grad_x


class GradTape:
    """Records executed ops so ``backward`` can replay their adjoints in
    reverse order.  A tape can be consumed only once."""

    def __init__(self):
        self._entries: list[tuple[tuple[int, ...], int, Callable]] = []
        self._consumed = False

    def __len__(self):
        return len(self._entries)

    def record(self, inputs: Sequence[int], output: int, vjp: Callable):
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._entries.append((tuple(inputs), output, vjp))

    def backward(self, output: int, grad: np.ndarray) -> dict[int, np.ndarray]:
        if self._consumed:
            raise RuntimeError("tape already consumed")
        self._consumed = True
        grads = {output: grad}
        for inputs, out, vjp in reversed(self._entries):
            g = grads.pop(out, None)
            if g is None:
                continue
            for i, gi in zip(inputs, vjp(g)):
                grads[i] = grads[i] + gi if i in grads else gi
        self._entries.clear()
        return grads


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn: Callable[..., float], inputs: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], eps: float = 1e-3, tolerance: float = 1e-3,
               max_samples: int | None = 64, rng=None, name: str = "op") -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn(*inputs)`` against central
    differences evaluated in float64.

    ``inputs`` are perturbed in place (and restored); at most ``max_samples``
    coordinates per input are probed, chosen with ``rng``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    worst, checked = 0.0, 0
    for arr, grad in zip(inputs, analytic):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_samples is not None and flat.size > max_samples:
            idx = rng.choice(flat.size, size=max_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(*inputs)
            flat[i] = orig - eps
            f_minus = fn(*inputs)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, float(relative_error(gflat[i], numeric)))
            checked += 1
    return GradCheckReport(name, worst, checked, tolerance)


def concat_backward(grad_out: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return split_channels(grad_out, sizes)


__all__ = [
    "conv_output_size",
    "deconv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_backward_data",
    "im2col",
    "col2im",
    "deconv2d_forward",
    "deconv2d_backward",
    "relu_forward",
    "relu_backward",
    "euclidean_loss",
    "crop_forward",
    "crop_backward",
    "concat_channels",
    "concat_backward",
    "LayerParams",
    "GradTape",
    "GradCheckReport",
    "grad_check",
    "relative_error",
]
