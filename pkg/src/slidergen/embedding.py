"""Slider-value embeddings and the delta-value bucketizer.

Slider intensities in [0, 1] are lifted to tokens in two halves: a fixed
frequency (sinusoidal) half that varies smoothly with the value, and a
learnable per-attribute class half that tells the attributes apart. Signed
value differences in [-1, 1] are quantized into uniform buckets for the
classification head.
"""

from __future__ import annotations

import numpy as np

FREQ_BASE = 10000.0


def frequency_ladder(dim: int, dtype=np.float64) -> np.ndarray:
    """Per-pair angular frequencies, length dim/4, decreasing from 1.

    Channel pair k (cosine channel 2k, sine channel 2k+1) shares the
    frequency FREQ_BASE ** (-k / (dim/4)).
    """
    if dim % 4 != 0:
        raise ValueError(f"embedding dim must be divisible by 4, got {dim}")
    n_freq = dim // 4
    k = np.arange(n_freq, dtype=np.float64)
    return np.exp(-k / n_freq * np.log(FREQ_BASE)).astype(dtype)


def positional_encode(values: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Encode slider values (..., N) into (..., N, dim/2) sinusoidal channels.

    Even channels are cos(v * w_k), odd channels sin(v * w_k), with the
    shared ladder from :func:`frequency_ladder`. All outputs lie in [-1, 1]
    and every channel is 1-Lipschitz in the slider value (w_k <= 1).
    """
    values = np.asarray(values, dtype=np.float64)
    omega = frequency_ladder(dim)
    ang = values[..., None] * omega  # (..., N, dim/4)
    out = np.empty(values.shape + (dim // 2,), dtype=np.float64)
    out[..., 0::2] = np.cos(ang)
    out[..., 1::2] = np.sin(ang)
    return out.astype(dtype, copy=False)


def slider_embed(pos_half: np.ndarray, class_half: np.ndarray) -> np.ndarray:
    """Concatenate positional and class halves along the channel axis.

    pos_half: (..., N, dim/2), class_half: (N, dim/2) or broadcastable.
    Row i of the result depends only on (v_i, class_half[i]).
    """
    pos_half = np.asarray(pos_half)
    class_half = np.asarray(class_half)
    if pos_half.shape[-2:] != class_half.shape[-2:]:
        raise ValueError(
            f"shape mismatch: positional half {pos_half.shape} vs class half {class_half.shape}"
        )
    tiled = np.broadcast_to(class_half, pos_half.shape).astype(pos_half.dtype, copy=False)
    return np.concatenate([pos_half, tiled], axis=-1)


def bucketize(delta, n_buckets: int):
    """Map a signed difference in [-1, 1] to a bucket index in [0, n_buckets).

    Uniform buckets of width 2/n_buckets; boundary values round down except
    +1, which clamps to the last bucket. Values outside [-1, 1] are a
    contract violation and are rejected.
    """
    if n_buckets < 1:
        raise ValueError(f"n_buckets must be >= 1, got {n_buckets}")
    arr = np.asarray(delta, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0):
        bad = float(arr.flat[int(np.argmax(np.abs(arr)))])
        raise ValueError(f"delta out of range [-1, 1]: {bad}")
    idx = np.floor((arr + 1.0) / 2.0 * n_buckets).astype(np.int64)
    idx = np.minimum(idx, n_buckets - 1)
    if np.isscalar(delta) or arr.ndim == 0:
        return int(idx)
    return idx


def bucket_center(index, n_buckets: int):
    """Center of bucket `index`: -1 + (2*index + 1) / n_buckets."""
    arr = np.asarray(index, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= n_buckets):
        raise ValueError(f"bucket index out of range [0, {n_buckets}): {arr}")
    centers = -1.0 + (2.0 * arr + 1.0) / n_buckets
    if np.isscalar(index) or arr.ndim == 0:
        return float(centers)
    return centers
