"""Differentiable layer primitives: explicit forward and backward pairs.

All functions are pure and operate on channel-major (C, D, H, W) float
arrays. Convolutions are valid (unpadded) cross-correlations; no kernel
flip. Backward functions are the exact adjoints of their forwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ParameterError, ShapeError, StateError

EPS_LOG = 1e-12


@dataclass
class ConvKernel:
    """Weights (C_out, C_in, k, k, k) and bias (C_out,) of one conv layer."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class PoolIndices:
    """Flat source index of each window maximum, shaped like the pool output."""

    indices: np.ndarray  # int64, (C, D', H', W')
    input_shape: tuple[int, int, int, int]
    pool: int


@dataclass
class DropoutMask:
    keep: np.ndarray  # bool, element-wise keep flags
    p_keep: float
    seed: int


def _check_conv_input(x: np.ndarray, kernel: ConvKernel) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected (C,D,H,W) input, got {x.ndim}-D")
    if x.shape[0] != kernel.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {kernel.c_in}")
    k = kernel.k
    if any(e < k for e in x.shape[1:]):
        raise ShapeError(f"spatial extents {x.shape[1:]} smaller than kernel {k}")


def conv3d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Valid 3D cross-correlation; each spatial extent shrinks by k - 1."""
    _check_conv_input(x, kernel)
    k = kernel.k
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    out = np.einsum("cdhwijl,ocijl->odhw", win, kernel.weights, optimize=True)
    out += kernel.bias[:, None, None, None]
    return out


def conv3d_backward(
    x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of conv3d_forward w.r.t. input, weights, and bias."""
    _check_conv_input(x, kernel)
    k = kernel.k
    expected = (kernel.c_out,) + tuple(e - k + 1 for e in x.shape[1:])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")

    grad_bias = grad_out.sum(axis=(1, 2, 3))

    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    grad_w = np.einsum("odhw,cdhwijl->ocijl", grad_out, win, optimize=True)

    # grad wrt input: full correlation of grad_out with the flipped kernel,
    # implemented as a valid conv on zero-padded grad_out.
    pad = k - 1
    g_pad = np.pad(grad_out, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    w_t = kernel.weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    gwin = sliding_window_view(g_pad, (k, k, k), axis=(1, 2, 3))
    grad_x = np.einsum("odhwijl,coijl->cdhw", gwin, w_t, optimize=True)
    return grad_x, grad_w, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Passes gradient where x > 0; subgradient at exactly 0 is 0."""
    return np.where(x > 0, grad_out, 0)


def maxpool3d_forward(x: np.ndarray, pool: int = 2) -> tuple[np.ndarray, PoolIndices]:
    """Disjoint pool^3 max pooling with stride = pool; ties break to the
    first element in (z, y, x) scan order."""
    c, d, h, w = x.shape
    if d % pool or h % pool or w % pool:
        raise ShapeError(f"spatial extents {x.shape[1:]} not divisible by pool {pool}")
    dd, hh, ww = d // pool, h // pool, w // pool
    win = (
        x.reshape(c, dd, pool, hh, pool, ww, pool)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, dd, hh, ww, pool**3)
    )
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    dz, rem = np.divmod(local, pool * pool)
    dy, dx = np.divmod(rem, pool)
    ci, zb, yb, xb = np.meshgrid(
        np.arange(c), np.arange(dd), np.arange(hh), np.arange(ww), indexing="ij"
    )
    z = zb * pool + dz
    y = yb * pool + dy
    xx = xb * pool + dx
    flat = ((ci * d + z) * h + y) * w + xx
    return out, PoolIndices(flat.astype(np.int64), x.shape, pool)


def maxpool3d_backward(indices: PoolIndices, grad_out: np.ndarray) -> np.ndarray:
    """Scatter: gradient flows only to the recorded argmax positions."""
    if grad_out.shape != indices.indices.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match indices {indices.indices.shape}"
        )
    c, d, h, w = indices.input_shape
    p = indices.pool
    flat = indices.indices
    # every stored index must lie inside its own pooling window
    ci, z, rem = flat // (d * h * w), (flat // (h * w)) % d, flat % (h * w)
    y, xx = rem // w, rem % w
    grid = np.meshgrid(
        np.arange(c), np.arange(d // p), np.arange(h // p), np.arange(w // p), indexing="ij"
    )
    ok = (
        (ci == grid[0])
        & (z // p == grid[1])
        & (y // p == grid[2])
        & (xx // p == grid[3])
    )
    if not ok.all():
        raise StateError("corrupt pool indices: entry outside its own window")
    grad_in = np.zeros(c * d * h * w, dtype=grad_out.dtype)
    grad_in[flat.ravel()] = grad_out.ravel()
    return grad_in.reshape(indices.input_shape)


def upconv3d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Transposed convolution, stride = kernel extent (non-overlapping);
    each spatial extent is multiplied by the kernel extent."""
    if x.shape[0] != kernel.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {kernel.c_in}")
    p = kernel.k
    c_out = kernel.c_out
    z, y, xw = x.shape[1:]
    out = np.einsum("czyx,ocijl->oziyjxl", x, kernel.weights, optimize=True)
    out = out.reshape(c_out, z * p, y * p, xw * p)
    out += kernel.bias[:, None, None, None]
    return out


def upconv3d_backward(
    x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = kernel.k
    z, y, xw = x.shape[1:]
    expected = (kernel.c_out, z * p, y * p, xw * p)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    g = grad_out.reshape(kernel.c_out, z, p, y, p, xw, p)
    grad_bias = grad_out.sum(axis=(1, 2, 3))
    grad_x = np.einsum("oziyjxl,ocijl->czyx", g, kernel.weights, optimize=True)
    grad_w = np.einsum("oziyjxl,czyx->ocijl", g, x, optimize=True)
    return grad_x, grad_w, grad_bias


def dropout_forward(
    x: np.ndarray, p_drop: float, seed: int, training: bool
) -> tuple[np.ndarray, DropoutMask]:
    """Inverted dropout: kept elements scaled by 1/(1 - p_drop) at train
    time; eval mode is the identity."""
    if not 0 <= p_drop < 1:
        raise ParameterError(f"p_drop must be in [0, 1), got {p_drop}")
    p_keep = 1.0 - p_drop
    if not training or p_drop == 0.0:
        return x, DropoutMask(np.ones(x.shape, dtype=bool), 1.0, seed)
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= p_drop
    out = np.where(keep, x / x.dtype.type(p_keep), x.dtype.type(0))
    return out, DropoutMask(keep, p_keep, seed)


def dropout_backward(mask: DropoutMask, grad_out: np.ndarray) -> np.ndarray:
    if mask.keep.shape != grad_out.shape:
        raise ShapeError(f"mask shape {mask.keep.shape} vs grad {grad_out.shape}")
    return np.where(mask.keep, grad_out / grad_out.dtype.type(mask.p_keep), 0)


def softmax_voxelwise(logits: np.ndarray) -> np.ndarray:
    """Per-voxel softmax over the channel axis, overflow-safe."""
    if logits.shape[0] < 2:
        raise ShapeError(f"softmax needs >= 2 channels, got {logits.shape[0]}")
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def weighted_cross_entropy(
    probs: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted cross entropy plus its gradient w.r.t. the softmax logits.

    loss = (1/sum w) * sum_x w(x) * -ln p_label(x); the gradient assumes
    `probs` came from softmax_voxelwise on the same logits.
    """
    c = probs.shape[0]
    if labels.shape != probs.shape[1:] or weights.shape != probs.shape[1:]:
        raise ShapeError(
            f"labels {labels.shape} / weights {weights.shape} misaligned with probs {probs.shape}"
        )
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= c:
        raise LabelError(f"label {int(labels.max())} >= class count {c}")
    wsum = weights.sum(dtype=np.float64)
    p_true = np.take_along_axis(probs, labels[None].astype(np.int64), axis=0)[0]
    loss = float(
        (weights * -np.log(np.maximum(p_true, EPS_LOG))).sum(dtype=np.float64) / wsum
    )
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[None].astype(np.int64), 1.0, axis=0)
    grad = (weights[None] * (probs - onehot) / probs.dtype.type(wsum)).astype(probs.dtype)
    return loss, grad
