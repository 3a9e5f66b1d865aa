"""Dense numeric kernels with explicit forward and backward passes.

Every kernel is a pure function over numpy arrays (row-major). The float32
path is the production one; passing float64 arrays switches the whole chain
to 64-bit, which is what the finite-difference tests use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class GeometryError(ValueError):
    """Operation parameters produce an empty or invalid output."""


@dataclass
class Conv3dKernel:
    """Weights of one 3-D convolution: ``weights[o, c, kl, kh, kw]`` plus bias.

    ``stride`` and ``padding`` are per-axis (L, H, W) non-negative integers;
    strides must be at least 1.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.stride = tuple(int(s) for s in self.stride)
        self.padding = tuple(int(p) for p in self.padding)
        if self.weights.ndim != 5:
            raise ShapeError(f"conv3d weights must be 5-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv3d bias shape {self.bias.shape} does not match "
                f"out_channels {self.weights.shape[0]}"
            )
        if any(s < 1 for s in self.stride):
            raise GeometryError(f"strides must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise GeometryError(f"padding must be >= 0, got {self.padding}")


def conv3d_output_shape(in_shape, kernel: Conv3dKernel):
    """Output (B, O, L', H', W') for ``conv3d_forward``; raises on bad geometry."""
    B, C, L, H, W = in_shape
    O, Cw, kL, kH, kW = kernel.weights.shape
    if C != Cw:
        raise ShapeError(f"input has {C} channels, kernel expects {Cw}")
    out = []
    for n, k, s, p in zip((L, H, W), (kL, kH, kW), kernel.stride, kernel.padding):
        o = (n + 2 * p - k) // s + 1
        if o < 1:
            raise GeometryError(
                f"empty conv3d output: extent {n} with kernel {k}, "
                f"stride {s}, padding {p}"
            )
        out.append(o)
    return (B, O, *out)


def _conv3d_windows(x, kernel: Conv3dKernel):
    """Strided view of all receptive fields: (B, C, L', H', W', kL, kH, kW)."""
    kL, kH, kW = kernel.weights.shape[2:]
    sL, sH, sW = kernel.stride
    pL, pH, pW = kernel.padding
    if any(kernel.padding):
        x = np.pad(x, ((0, 0), (0, 0), (pL, pL), (pH, pH), (pW, pW)))
    win = sliding_window_view(x, (kL, kH, kW), axis=(2, 3, 4))
    return win[:, :, ::sL, ::sH, ::sW]


def conv3d_forward(x, kernel: Conv3dKernel):
    """3-D convolution of ``x[b, c, l, h, w]``.

    Each output element is the kernel bias plus the sum of weights times the
    matching input window over all input channels and the L x H x W extent.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be B x C x L x H x W, got {x.shape}")
    out_shape = conv3d_output_shape(x.shape, kernel)
    win = _conv3d_windows(x, kernel)
    out = np.tensordot(win, kernel.weights, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    out += kernel.bias.reshape(1, -1, 1, 1, 1)
    assert out.shape == out_shape
    return out


def conv3d_backward(x, kernel: Conv3dKernel, grad_out):
    """Analytic gradients of ``conv3d_forward`` w.r.t. input, weights and bias."""
    out_shape = conv3d_output_shape(x.shape, kernel)
    if grad_out.shape != out_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {out_shape}")
    win = _conv3d_windows(x, kernel)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    grad_x = _conv3d_input_grad(x.shape, kernel, grad_out)
    return grad_x, grad_w.astype(grad_out.dtype, copy=False), grad_b


def _conv3d_input_grad(x_shape, kernel: Conv3dKernel, grad_out):
    # Adjoint of the forward pass. Contract grad_out with the weights over
    # output channels, then scatter the per-tap blocks back onto the padded
    # input with one strided slice-add per kernel offset (col2im).
    B, C, L, H, W = x_shape
    kL, kH, kW = kernel.weights.shape[2:]
    sL, sH, sW = kernel.stride
    Lo, Ho, Wo = grad_out.shape[2:]
    # gcols[b, lo, ho, wo, c, i, j, m] = sum_o grad_out[b, o, ...] * w[o, c, i, j, m]
    gcols = np.tensordot(grad_out, kernel.weights, axes=([1], [0]))
    padded = [n + 2 * p for n, p in zip((L, H, W), kernel.padding)]
    grad_x = np.zeros((B, C, *padded), dtype=grad_out.dtype)
    for i in range(kL):
        for j in range(kH):
            for m in range(kW):
                block = np.moveaxis(gcols[:, :, :, :, :, i, j, m], -1, 1)
                grad_x[
                    :,
                    :,
                    i : i + sL * Lo : sL,
                    j : j + sH * Ho : sH,
                    m : m + sW * Wo : sW,
                ] += block
    pL, pH, pW = kernel.padding
    return np.ascontiguousarray(grad_x[:, :, pL : pL + L, pH : pH + H, pW : pW + W])


def linear_forward(x, weights, bias):
    """Affine map: ``out[b, o] = bias[o] + sum_i weights[o, i] * x[b, i]``."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"linear expects (B, I) x (O, I), got {x.shape} and {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return x @ weights.T + bias


def linear_backward(x, weights, grad_out):
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} is inconsistent")
    grad_x = grad_out @ weights
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Grad masked where the forward input was <= 0."""
    return grad_out * (x > 0)


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    """Per-row standardization of ``x[b, d]`` followed by a gamma/beta affine.

    Variance uses the 1/D convention; ``eps`` sits inside the square root so
    constant rows map to zero instead of blowing up.
    """
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects (B, D), got {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def layer_norm_backward(x, gamma, grad_out, eps=1e-5):
    D = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    gh = grad_out * gamma
    grad_x = (
        inv_std
        / D
        * (D * gh - gh.sum(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True))
    )
    return grad_x, grad_gamma, grad_beta


class BatchNormStats:
    """Running mean/variance of one batch-norm layer (per channel)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False

    def update(self, batch_mean, batch_var, momentum):
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            self.mean = (1 - momentum) * self.mean + momentum * batch_mean
            self.var = (1 - momentum) * self.var + momentum * batch_var


def batch_norm3d_forward(x, gamma, beta, stats: BatchNormStats, training,
                         momentum=0.1, eps=1e-5):
    """Channel-wise normalization of ``x[b, c, ...]``.

    Training mode normalizes with the current batch statistics (biased
    variance over every non-channel axis) and folds them into ``stats``.
    Eval mode uses the running statistics and raises if they were never set.
    """
    if x.ndim < 3:
        raise ShapeError(f"batch_norm3d expects (B, C, ...), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    axes = (0, *range(2, x.ndim))
    shape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats.update(mean, var, momentum)
    else:
        if not stats.initialized:
            raise RuntimeError(
                "batch_norm3d eval mode requires initialized running stats"
            )
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x - mean.reshape(shape)) * (gamma * inv_std).reshape(shape) + beta.reshape(shape)


def batch_norm3d_backward(x, gamma, stats: BatchNormStats, training, grad_out, eps=1e-5):
    """Gradients of ``batch_norm3d_forward`` w.r.t. input, gamma and beta."""
    C = x.shape[1]
    axes = (0, *range(2, x.ndim))
    shape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    if training:
        n = x.size // C
        grad_x = (gamma * inv_std).reshape(shape) / n * (
            n * grad_out
            - grad_beta.reshape(shape)
            - xhat * grad_gamma.reshape(shape)
        )
    else:
        grad_x = grad_out * (gamma * inv_std).reshape(shape)
    return grad_x, grad_gamma, grad_beta


def global_avg_pool_forward(x):
    """Mean over every non-batch, non-channel axis: (B, C, ...) -> (B, C)."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (B, C, ...), got {x.shape}")
    return x.mean(axis=tuple(range(2, x.ndim)))


def global_avg_pool_backward(x_shape, grad_out):
    n = int(np.prod(x_shape[2:]))
    shape = x_shape[:2] + (1,) * (len(x_shape) - 2)
    return np.broadcast_to(grad_out.reshape(shape) / n, x_shape).copy()


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch plus the gradient w.r.t. logits.

    ``labels`` are class indices. The gradient is (softmax - onehot) / B,
    matching the 1/M batch-mean in the loss.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, N), got {logits.shape}")
    labels = np.asarray(labels)
    B, N = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= N:
        raise IndexError(f"labels must lie in [0, {N}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_probs = z[np.arange(B), labels] - log_norm
    loss = -log_probs.mean()
    grad = softmax(logits)
    grad[np.arange(B), labels] -= 1.0
    grad /= B
    return float(loss), grad.astype(logits.dtype, copy=False)


def outer_product_forward(a, b):
    """``out[i, j] = a[i] * b[j]`` for two equal-length vectors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"outer_product expects equal-length vectors, got "
                         f"{a.shape} and {b.shape}")
    return np.outer(a, b)


def outer_product_backward(a, b, grad_out):
    return grad_out @ b, grad_out.T @ a


def _resize_axis_weights(n_in, n_out):
    # Align-corners source coordinates: i * (n_in - 1) / (n_out - 1).
    if n_out == 1:
        lo = np.zeros(1, dtype=np.int64)
        return lo, lo.copy(), np.zeros(1)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(pos.astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize_forward(x, out_h, out_w):
    """Align-corners bilinear resize of the last two axes.

    Corner pixels of the input are reproduced exactly in the output.
    """
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"resize target must be >= 1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize needs >= 2 axes, got {x.shape}")
    H, W = x.shape[-2:]
    ylo, yhi, fy = _resize_axis_weights(H, out_h)
    xlo, xhi, fx = _resize_axis_weights(W, out_w)
    fy = fy.reshape(-1, 1)
    top = x[..., ylo, :]
    bot = x[..., yhi, :]
    rows = top + (bot - top) * fy
    left = rows[..., :, xlo]
    right = rows[..., :, xhi]
    return left + (right - left) * fx


def bilinear_resize_backward(in_h, in_w, grad_out):
    """Adjoint of ``bilinear_resize_forward``; grad_out is (..., out_h, out_w)."""
    out_h, out_w = grad_out.shape[-2:]
    ylo, yhi, fy = _resize_axis_weights(in_h, out_h)
    xlo, xhi, fx = _resize_axis_weights(in_w, out_w)
    lead = grad_out.shape[:-2]
    g = grad_out.reshape(-1, out_h, out_w)
    rows = np.zeros((g.shape[0], in_h, out_w), dtype=grad_out.dtype)
    fy_col = fy.reshape(1, -1, 1)
    np.add.at(rows, (slice(None), ylo), g * (1 - fy_col))
    np.add.at(rows, (slice(None), yhi), g * fy_col)
    grad_x = np.zeros((g.shape[0], in_h, in_w), dtype=grad_out.dtype)
    fx_row = fx.reshape(1, 1, -1)
    np.add.at(grad_x, (slice(None), slice(None), xlo), rows * (1 - fx_row))
    np.add.at(grad_x, (slice(None), slice(None), xhi), rows * fx_row)
    return grad_x.reshape(*lead, in_h, in_w)


def concat_channels(a, b, axis):
    """Concatenate two tensors along ``axis``; every other extent must match."""
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(
                f"extent mismatch on axis {d}: {a.shape} vs {b.shape}"
            )
    return np.concatenate([a, b], axis=axis)
