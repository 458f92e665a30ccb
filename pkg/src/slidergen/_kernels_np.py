"""Pure-numpy implementations of the hot elementwise kernels.

Matmuls run through BLAS either way; these are the fusable row-wise and
elementwise chains that dominate the remaining step time. The compiled
extension in ``_core.pyx`` implements the same contracts; ``kernels.py``
picks one at import time. Shapes are 2D (rows, channels) unless noted,
dtype float32 or float64.
"""

from __future__ import annotations

import numpy as np

_INV_SQRT2PI_2 = 0.7978845608028654  # sqrt(2/pi)
_GELU_CUBIC = 0.044715


def layernorm_fwd(x: np.ndarray, eps: float = 1e-5):
    """Row-wise layer norm without affine. Returns (normalized, 1/std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def layernorm_bwd(dy: np.ndarray, y: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    """Gradient through layernorm_fwd given the normalized output y."""
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = np.mean(dy * y, axis=-1, keepdims=True)
    return rstd[..., None] * (dy - m1 - y * m2)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    m = x.max(axis=-1, keepdims=True)
    y = x - m
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y


def softmax_bwd(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    s = np.sum(dp * p, axis=-1, keepdims=True)
    return p * (dp - s)


def _tanh_inner(x: np.ndarray) -> np.ndarray:
    """tanh(sqrt(2/pi) * (x + 0.044715 x^3)), built with in-place ops."""
    inner = x * x
    inner *= x
    inner *= _GELU_CUBIC
    inner += x
    inner *= _INV_SQRT2PI_2
    np.tanh(inner, out=inner)
    return inner


def gelu_fwd(x: np.ndarray):
    """Tanh-approximated GELU. numpy's SIMD tanh makes this the fast path
    on both backends; a scalar compiled loop would be slower.

    Returns (y, th); th is the inner tanh, cached for the backward pass.
    """
    th = _tanh_inner(x)
    y = th + 1.0
    y *= 0.5
    y *= x
    return y, th


def gelu_bwd(x: np.ndarray, th: np.ndarray, dy: np.ndarray) -> np.ndarray:
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    poly = x * x
    poly *= 3.0 * _GELU_CUBIC
    poly += 1.0
    poly *= 0.5 * _INV_SQRT2PI_2
    poly *= x
    poly *= sech2
    local = th + 1.0
    local *= 0.5
    local += poly
    local *= dy
    return local


def silu_fwd(x: np.ndarray) -> np.ndarray:
    sig = np.exp(-x)
    sig += 1.0
    np.divide(x, sig, out=sig)
    return sig


def silu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    sig = np.exp(-x)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    inner = 1.0 - sig
    inner *= x
    inner += 1.0
    inner *= sig
    inner *= dy
    return inner


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 lr: float, beta1: float, beta2: float, eps: float,
                 weight_decay: float, bias_c1: float, bias_c2: float) -> None:
    """Fused in-place AdamW step with decoupled weight decay.

    bias_c1 = 1 - beta1**step, bias_c2 = 1 - beta2**step.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / bias_c1
    vhat = v / bias_c2
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
