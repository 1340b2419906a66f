"""Dense-tensor layer primitives.

Tensors are C-contiguous float32 numpy arrays shaped ``[N, C, H, W]`` with
all extents >= 1. Every primitive validates its inputs, and every primitive
checks its output for NaN/Inf: a non-finite value is a contract violation
surfaced as :class:`~yoloface.errors.NumericsError`, never returned.

Convolution is cross-correlation (no kernel flip). Conv padding is zeros;
maxpool padding is -inf-equivalent (never selected for finite inputs).
"""
import math

import numpy as np

from ..errors import NumericsError, ShapeError
from ._backend import (
    active_backend,
    available_backends,
    get_num_threads,
    kernels,
    set_backend,
    set_num_threads,
)

__all__ = [
    "conv2d", "batchnorm_apply", "fold_batchnorm", "silu", "sigmoid",
    "maxpool", "upsample_nearest2x", "concat_channels", "add_elementwise",
    "chunk2_channels", "channel_shuffle", "conv_output_size",
    "active_backend", "available_backends", "set_backend",
    "get_num_threads", "set_num_threads",
]


def _as_tensor(x, op, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{op}: {name} must be 4-D [N,C,H,W], got ndim={x.ndim}")
    if any(e < 1 for e in x.shape):
        raise ShapeError(f"{op}: {name} has empty extent, shape={x.shape}")
    if x.dtype != np.float32:
        x = x.astype(np.float32)
    return np.ascontiguousarray(x)


def _as_vector(v, length, op, name):
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float32).reshape(-1))
    if v.shape[0] != length:
        raise ShapeError(f"{op}: {name} has length {v.shape[0]}, expected {length}")
    return v


def _check_finite(out, op):
    # One fused reduction: NaN/Inf in any element poisons the f64 sum.
    if not math.isfinite(float(np.sum(out, dtype=np.float64))):
        raise NumericsError(f"{op}: produced non-finite values")
    return out


def conv_output_size(size, k, stride, pad):
    """Closed-form output extent of conv/maxpool along one axis."""
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, pad=0, groups=1):
    """2-D cross-correlation.

    ``weight`` is ``[Cout, Cin/groups, k, k]`` (square kernels). Output
    extents follow :func:`conv_output_size`.
    """
    x = _as_tensor(x, "conv2d")
    weight = np.ascontiguousarray(np.asarray(weight, dtype=np.float32))
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin/g,k,k], got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid geometry k={k} stride={stride} pad={pad}")
    if groups < 1 or c % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} does not divide Cin={c} and Cout={cout}")
    if cin_g != c // groups:
        raise ShapeError(
            f"conv2d: weight expects {cin_g} input channels per group, input has {c // groups}"
        )
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {h}x{w}, k={k} s={stride} p={pad}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    nt = get_num_threads()
    with np.errstate(over="ignore", invalid="ignore"):
        if k == 1 and stride == 1 and groups == 1 and pad == 0:
            out = np.matmul(weight.reshape(cout, c), xp.reshape(n, c, h * w))
            out = out.reshape(n, cout, ho, wo)
        elif groups == c and cout == c and k > 1:
            out = kernels().depthwise_conv(xp, weight[:, 0], stride, nt)
        else:
            cols = kernels().im2col(xp, k, stride, nt)
            if groups == 1:
                out = np.matmul(weight.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
            else:
                wg = weight.reshape(groups, cout // groups, -1)
                pg = cols.reshape(n, groups, (c // groups) * k * k, ho * wo)
                out = np.matmul(wg[None], pg).reshape(n, cout, ho, wo)
        if bias is not None:
            out += _as_vector(bias, cout, "conv2d", "bias")[None, :, None, None]
    return _check_finite(np.ascontiguousarray(out), "conv2d")


def _bn_scale_shift(gamma, beta, mean, var, eps):
    scale = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    shift = beta.astype(np.float64) - mean.astype(np.float64) * scale
    return scale.astype(np.float32), shift.astype(np.float32)


def batchnorm_apply(x, gamma, beta, mean, var, eps=1e-3):
    """Per-channel ``y = (x - mean)/sqrt(var + eps) * gamma + beta``."""
    x = _as_tensor(x, "batchnorm_apply")
    c = x.shape[1]
    gamma = _as_vector(gamma, c, "batchnorm_apply", "gamma")
    beta = _as_vector(beta, c, "batchnorm_apply", "beta")
    mean = _as_vector(mean, c, "batchnorm_apply", "mean")
    var = _as_vector(var, c, "batchnorm_apply", "var")
    if np.any(var < 0):
        raise ShapeError("batchnorm_apply: variance must be non-negative")
    scale, shift = _bn_scale_shift(gamma, beta, mean, var, eps)
    out = x * scale[None, :, None, None] + shift[None, :, None, None]
    return _check_finite(out, "batchnorm_apply")


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps=1e-3):
    """Fold a BN layer into the preceding conv: conv-then-bn == folded conv.

    Returns the adjusted ``(weight, bias)`` pair.
    """
    weight = np.asarray(weight, dtype=np.float32)
    cout = weight.shape[0]
    gamma = _as_vector(gamma, cout, "fold_batchnorm", "gamma")
    beta = _as_vector(beta, cout, "fold_batchnorm", "beta")
    mean = _as_vector(mean, cout, "fold_batchnorm", "mean")
    var = _as_vector(var, cout, "fold_batchnorm", "var")
    if np.any(var < 0):
        raise ShapeError("fold_batchnorm: variance must be non-negative")
    scale, shift = _bn_scale_shift(gamma, beta, mean, var, eps)
    w = weight * scale[:, None, None, None]
    b = shift if bias is None else _as_vector(bias, cout, "fold_batchnorm", "bias") * scale + shift
    return np.ascontiguousarray(w), np.ascontiguousarray(b)


def sigmoid(x):
    """Numerically stable logistic function (any dtype/shape)."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """Elementwise ``x * sigmoid(x)``."""
    x = _as_tensor(x, "silu")
    return _check_finite(x * sigmoid(x), "silu")


def maxpool(x, k, stride=1, pad=0):
    """Window maximum; padding is ignore-pad (acts as -inf)."""
    x = _as_tensor(x, "maxpool")
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"maxpool: invalid geometry k={k} stride={stride} pad={pad}")
    _, _, h, w = x.shape
    if conv_output_size(h, k, stride, pad) < 1 or conv_output_size(w, k, stride, pad) < 1:
        raise ShapeError(f"maxpool: empty output for input {h}x{w}, k={k} s={stride} p={pad}")
    out = kernels().maxpool(x, k, stride, pad, get_num_threads())
    return _check_finite(out, "maxpool")


def upsample_nearest2x(x):
    """Nearest-neighbour 2x upsampling: each value becomes a 2x2 block."""
    x = _as_tensor(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, 2, w, 2))
    return out.reshape(n, c, 2 * h, 2 * w)


def concat_channels(*xs):
    """Concatenate along the channel axis; N/H/W must agree."""
    if not xs:
        raise ShapeError("concat_channels: needs at least one input")
    ts = [_as_tensor(x, "concat_channels") for x in xs]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: N/H/W mismatch {ref} vs {t.shape}")
    return np.concatenate(ts, axis=1)


def add_elementwise(a, b):
    a = _as_tensor(a, "add_elementwise", "a")
    b = _as_tensor(b, "add_elementwise", "b")
    if a.shape != b.shape:
        raise ShapeError(f"add_elementwise: shape mismatch {a.shape} vs {b.shape}")
    return _check_finite(a + b, "add_elementwise")


def chunk2_channels(x):
    """Split into two equal channel halves (contiguous copies)."""
    x = _as_tensor(x, "chunk2_channels")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"chunk2_channels: channel count {c} is odd")
    half = c // 2
    return np.ascontiguousarray(x[:, :half]), np.ascontiguousarray(x[:, half:])


def channel_shuffle(x, groups):
    """Interleave channel groups: reshape (g, C/g), transpose, flatten.

    ``channel_shuffle(x, C // g)`` applies the inverse permutation.
    """
    x = _as_tensor(x, "channel_shuffle")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_shuffle: groups={groups} does not divide C={c}")
    out = x.reshape(n, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out.reshape(n, c, h, w))
