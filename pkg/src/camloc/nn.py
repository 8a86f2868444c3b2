"""Minimal dense-tensor layers with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every forward
function returns ``(output, cache)``; the matching backward consumes that
cache. Gradients are checked against central differences in the test-suite
at float64; training runs at float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "conv2d_forward",
    "conv2d_backward",
    "conv_output_size",
    "batchnorm_forward",
    "batchnorm_backward",
    "RunningStats",
    "relu_forward",
    "relu_backward",
    "maxpool_forward",
    "maxpool_backward",
    "gap_forward",
    "gap_backward",
    "dense_forward",
    "dense_backward",
    "softmax",
    "softmax_cross_entropy",
    "OptimizerState",
    "sgd_momentum_step",
    "lr_at_epoch",
    "is_decayed",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _require_cache(cache, op: str):
    if cache is None:
        raise ValueError(f"{op}: missing forward cache; run the forward pass first")
    return cache


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_forward(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlate ``x[N,C,H,W]`` with ``w[F,C,kh,kw]`` and add ``b[F]``."""
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, kernels expect {kc}"
        )
    if b.shape != (f,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {f} kernels")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (+{padding})")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    # (N, C, H', W', kh, kw) view, no copy until tensordot
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, H', W', F
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    cache = (x.shape, xp, w, stride, padding)
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache):
    """Return ``(grad_input, grad_kernels, grad_bias)`` for :func:`conv2d_forward`."""
    x_shape, xp, w, stride, padding = _require_cache(cache, "conv2d_backward")
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(wd, kw, stride, padding)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, f, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, f, oh, ow)}")

    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    grad_w = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))  # F, C, kh, kw
    grad_b = grad_out.sum(axis=(0, 2, 3))

    dcols = np.tensordot(grad_out, w, axes=([1], [0]))  # N, H', W', C, kh, kw
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, H', W'
    dxp = np.zeros(xp.shape, dtype=np.result_type(grad_out, w))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.9) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)


def batchnorm_forward(x, gamma, beta, running: RunningStats, mode: str = "train", eps: float = 1e-5):
    """Per-channel batch normalisation over (N, H, W).

    In ``train`` mode the batch statistics are used and ``running`` is
    updated in place by an exponential moving average; in ``infer`` mode the
    running statistics are used and left untouched.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    if mode == "train":
        if n * h * w < 2:
            raise ValueError("batchnorm in train mode needs N*H*W >= 2 (variance undefined)")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = running.momentum
        running.mean[...] = m * running.mean + (1 - m) * mean
        running.var[...] = m * running.var + (1 - m) * var
    elif mode == "infer":
        mean = running.mean.astype(x.dtype, copy=False)
        var = running.var.astype(x.dtype, copy=False)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, mode)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, mode = _require_cache(cache, "batchnorm_backward")
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma[None, :, None, None]
    if mode == "infer":
        return dxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    grad_x = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# elementwise, pooling, head
# ---------------------------------------------------------------------------


def relu_forward(x):
    x = np.asarray(x)
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out, cache):
    mask = _require_cache(cache, "relu_backward")
    return grad_out * mask


def maxpool_forward(x, size: int = 2):
    """Non-overlapping ``size x size`` max pooling; spatial dims must divide."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool size {size} does not divide spatial shape {h}x{w}")
    blocks = x.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))
    # first maximum in each block receives the gradient
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)
    return out, (x.shape, arg, size)


def maxpool_backward(grad_out, cache):
    shape, arg, size = _require_cache(cache, "maxpool_backward")
    n, c, h, w = shape
    onehot = np.zeros(arg.shape + (size * size,), dtype=grad_out.dtype)
    np.put_along_axis(onehot, arg[..., None], 1, axis=-1)
    g = onehot * grad_out[..., None]
    g = g.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(shape)


def gap_forward(x):
    x = np.asarray(x)
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(grad_out, cache):
    shape = _require_cache(cache, "gap_backward")
    u, v = shape[2], shape[3]
    return np.broadcast_to(grad_out[:, :, None, None] / (u * v), shape).copy()


def dense_forward(x, w, b):
    """``x[N,K] @ w[C,K].T + b[C]``."""
    x = np.asarray(x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T + b, (x, w)


def dense_backward(grad_out, cache):
    x, w = _require_cache(cache, "dense_backward")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def is_decayed(name: str) -> bool:
    """Only kernel and dense weights receive L2 decay."""
    return name.endswith(".weight")


@dataclass
class OptimizerState:
    momentum: float = 0.8
    weight_decay: float = 0.0005
    base_lr: float = 0.01
    decay_per_epoch: float = 0.01
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 <= self.decay_per_epoch < 1:
            raise ValueError("decay_per_epoch must lie in [0, 1)")


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    decayed: Callable[[str], bool] = is_decayed,
) -> None:
    """In-place update ``v <- mu*v - lr*(g + wd*p)``, ``p <- p + v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        step = g + state.weight_decay * p if decayed(name) else g
        v *= state.momentum
        v -= lr * step
        p += v


def lr_at_epoch(state: OptimizerState, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return state.base_lr * (1.0 - state.decay_per_epoch) ** epoch
