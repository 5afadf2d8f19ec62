"""
Layer primitives for a 1D U-Net with hand-written backward passes.

Tensors are plain numpy arrays laid out as [batch, channels, time]. Every
forward function has a matching ``*_backward`` that returns gradients with
respect to its inputs and parameters. ``grad_check`` compares those analytic
gradients against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError


@dataclass
class ConvLayer:
    """Stride-1 "same" convolution (cross-correlation, no kernel flip)."""

    weight: np.ndarray  # [out_ch, in_ch, k]
    bias: np.ndarray  # [out_ch]
    dilation: int = 1

    @property
    def padding(self) -> tuple[int, int]:
        total = (self.weight.shape[2] - 1) * self.dilation
        return total // 2, total - total // 2


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"
    # Running statistics are updated in place during train-mode forwards
    # unless this is switched off (gradient checking).
    track_stats: bool = field(default=True)


def _check3d(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{name} must be [B, C, T], got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, dilation: int, pad: tuple[int, int]) -> np.ndarray:
    B, C, T = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), pad))
    cols = np.empty((B, C, k, T), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j * dilation:j * dilation + T]
    return cols.reshape(B, C * k, T)


def conv1d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check3d(x)
    out_ch, in_ch, k = layer.weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv expects {in_ch} input channels, got {x.shape[1]}")
    cols = _im2col(x, k, layer.dilation, layer.padding)
    y = np.matmul(layer.weight.reshape(out_ch, in_ch * k), cols)
    y += layer.bias[None, :, None]
    return y


def conv1d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias)."""
    _check3d(x)
    out_ch, in_ch, k = layer.weight.shape
    B, C, T = x.shape
    if C != in_ch or grad_out.shape != (B, out_ch, T):
        raise ShapeError(
            f"inconsistent shapes: x {x.shape}, weight {layer.weight.shape}, "
            f"grad_out {grad_out.shape}")
    cols = _im2col(x, k, layer.dilation, layer.padding)
    grad_bias = grad_out.sum(axis=(0, 2))
    grad_w = np.matmul(grad_out, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(out_ch, in_ch, k)

    w2 = layer.weight.reshape(out_ch, in_ch * k)
    grad_cols = np.matmul(w2.T, grad_out).reshape(B, in_ch, k, T)
    left, right = layer.padding
    grad_xp = np.zeros((B, in_ch, T + left + right), dtype=grad_out.dtype)
    d = layer.dilation
    for j in range(k):
        grad_xp[:, :, j * d:j * d + T] += grad_cols[:, :, j, :]
    return grad_xp[:, :, left:left + T], grad_w, grad_bias


# ---------------------------------------------------------------- activation

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------- batch norm

def batchnorm1d(x: np.ndarray, layer: BatchNormLayer) -> np.ndarray:
    _check3d(x)
    B, C, T = x.shape
    if layer.mode == "train":
        n = B * T
        if n < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        if layer.track_stats:
            m = layer.momentum
            layer.running_mean *= 1 - m
            layer.running_mean += m * mean
            layer.running_var *= 1 - m
            layer.running_var += m * var * (n / (n - 1))
    elif layer.mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown batch norm mode {layer.mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    scale = (layer.gamma * inv_std).astype(x.dtype, copy=False)
    shift = (layer.beta - mean * layer.gamma * inv_std).astype(x.dtype, copy=False)
    return x * scale[None, :, None] + shift[None, :, None]


def batchnorm1d_backward(x: np.ndarray, layer: BatchNormLayer, grad_out: np.ndarray):
    """Return (grad_x, grad_gamma, grad_beta).

    In train mode the batch statistics are recomputed from ``x``.
    """
    _check3d(x)
    if layer.mode == "train":
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype, copy=False)
    xhat = (x - mean[None, :, None].astype(x.dtype)) * inv_std[None, :, None]
    grad_beta = grad_out.sum(axis=(0, 2))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    g = (layer.gamma * inv_std).astype(x.dtype, copy=False)[None, :, None]
    if layer.mode == "train":
        n = x.shape[0] * x.shape[2]
        grad_x = g * (grad_out
                      - grad_beta[None, :, None] / n
                      - xhat * grad_gamma[None, :, None] / n)
    else:
        grad_x = g * grad_out
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- pooling / upsampling

def maxpool1d(x: np.ndarray, width: int):
    """Ceil-mode max pooling over disjoint windows.

    Returns the pooled tensor and within-window argmax indices.
    """
    _check3d(x)
    if width < 1:
        raise ValueError("pool width must be >= 1")
    B, C, T = x.shape
    n_out = -(-T // width)
    pad = n_out * width - T
    if pad:
        x = np.concatenate([x, np.full((B, C, pad), -np.inf, dtype=x.dtype)], axis=2)
    windows = x.reshape(B, C, n_out, width)
    idx = windows.argmax(axis=3)
    y = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    return y, idx


def maxpool1d_backward(grad_out: np.ndarray, idx: np.ndarray, width: int, t_in: int) -> np.ndarray:
    B, C, n_out = grad_out.shape
    grad = np.zeros((B, C, n_out, width), dtype=grad_out.dtype)
    np.put_along_axis(grad, idx[..., None], grad_out[..., None], axis=3)
    return grad.reshape(B, C, n_out * width)[:, :, :t_in]


def upsample_nn(x: np.ndarray, factor: int, target_len: int) -> np.ndarray:
    """Repeat each sample ``factor`` times, then right-trim to ``target_len``."""
    _check3d(x)
    T = x.shape[2]
    if not (factor * T - factor + 1 <= target_len <= factor * T):
        raise ShapeError(
            f"target length {target_len} unreachable from {T} samples with factor {factor}")
    return np.repeat(x, factor, axis=2)[:, :, :target_len]


def upsample_nn_backward(grad_out: np.ndarray, factor: int, t_in: int) -> np.ndarray:
    B, C, T = grad_out.shape
    full = np.zeros((B, C, t_in * factor), dtype=grad_out.dtype)
    full[:, :, :T] = grad_out
    return full.reshape(B, C, t_in, factor).sum(axis=3)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check3d(a, "a")
    _check3d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out: np.ndarray, c1: int):
    return grad_out[:, :c1], grad_out[:, c1:]


# ---------------------------------------------------------------- output head

def softmax_channels(x: np.ndarray) -> np.ndarray:
    _check3d(x)
    if x.shape[1] != 2:
        raise ShapeError("softmax head expects exactly 2 channels")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(p: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient wrt the logits given the softmax output ``p``."""
    return p * (grad_out - (grad_out * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` wrt every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two gradient magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(loss_and_grads: Callable[[dict], tuple[float, dict]],
               params: dict[str, np.ndarray],
               tolerance: float = 1e-4,
               step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grads(params)`` must return the scalar loss and a dict of
    gradients keyed like ``params``. Arrays in ``params`` should be float64;
    they are perturbed in place and restored. Failures are reported, not raised.
    """
    _, analytic = loss_and_grads(params)
    errors = {}
    for name, arr in params.items():
        numeric = numerical_gradient(lambda: loss_and_grads(params)[0], arr, step)
        errors[name] = relative_error(np.asarray(analytic[name], dtype=np.float64), numeric)
    return GradCheckReport(errors, tolerance)
