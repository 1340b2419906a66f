"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when forced via
``YOLOFACE_BACKEND=python``. Semantics match the compiled versions; the
summation order inside a convolution window may differ, so cross-backend
agreement is to float32 rounding, not bit-exact.
"""
import numpy as np

name = "python"


def im2col(xp, k, stride, num_threads=0):
    """Extract k x k patches from a padded NCHW array.

    Returns ``[N, C*k*k, Ho*Wo]`` with the row index ordered channel-major
    (``c*k*k + i*k + j``), matching the weight reshape used by conv2d.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]        # [N, C, Ho, Wo, k, k]
    win = win.transpose(0, 1, 4, 5, 2, 3)      # [N, C, k, k, Ho, Wo]
    return win.reshape(n, c * k * k, ho * wo)  # reshape of a view copies


def depthwise_conv(xp, w, stride, num_threads=0):
    """Depthwise convolution on a padded input; ``w`` is ``[C, k, k]``."""
    k = w.shape[-1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,cij->nchw", win, w, optimize=True)
    return np.ascontiguousarray(out, dtype=np.float32)


def maxpool(x, k, stride, pad, num_threads=0):
    """Window maximum with ignore-pad semantics (padding acts as -inf)."""
    if pad > 0:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (pad, pad), (pad, pad)),
            constant_values=-np.inf,
        )
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.max(axis=(-2, -1)))
