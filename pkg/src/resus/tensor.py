"""Per-channel reductions over NCHW activation tensors.

Tensors are plain ``numpy`` arrays of shape ``(n, c, h, w)``. Reductions
accumulate in float64 and return float64 channel vectors.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ValueError):
    """Raised when a reduction sees NaN or inf."""


def as_tensor4(t, name: str = "tensor") -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"{name}: expected 4-d NCHW array, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ValueError(f"{name}: all dimensions must be >= 1, got {t.shape}")
    return t


def _check_finite(t: np.ndarray, name: str) -> None:
    bad = ~np.isfinite(t)
    if bad.any():
        channels = np.unique(np.nonzero(bad)[1])
        raise NonFiniteError(
            f"{name}: non-finite values in channel(s) {channels.tolist()}"
        )


def _channel_rows(t: np.ndarray) -> np.ndarray:
    # (c, n*h*w) in flat (n, h, w) order per channel
    n, c, h, w = t.shape
    return np.moveaxis(t, 1, 0).reshape(c, n * h * w).astype(np.float64)


def channel_mean(t, name: str = "tensor") -> np.ndarray:
    """Mean of each channel over batch and spatial positions."""
    t = as_tensor4(t, name)
    _check_finite(t, name)
    return _channel_rows(t).mean(axis=1)


def channel_variance(t, name: str = "tensor") -> np.ndarray:
    """Population variance (divisor n*h*w) of each channel, two-pass."""
    t = as_tensor4(t, name)
    _check_finite(t, name)
    rows = _channel_rows(t)
    dev = rows - rows.mean(axis=1, keepdims=True)
    return (dev * dev).mean(axis=1)


def channel_moments(t, name: str = "tensor") -> tuple[int, np.ndarray, np.ndarray]:
    """Return ``(count, mean, M2)`` per channel, M2 being the summed squared deviation."""
    t = as_tensor4(t, name)
    _check_finite(t, name)
    rows = _channel_rows(t)
    mean = rows.mean(axis=1)
    dev = rows - mean[:, None]
    return rows.shape[1], mean, (dev * dev).sum(axis=1)


def scale_channels(t, g) -> np.ndarray:
    t = as_tensor4(t)
    g = np.asarray(g)
    if g.ndim != 1 or g.shape[0] != t.shape[1]:
        raise ValueError(
            f"scale vector length {g.shape} does not match channel count {t.shape[1]}"
        )
    return (t * g.astype(t.dtype)[None, :, None, None]).astype(t.dtype, copy=False)
