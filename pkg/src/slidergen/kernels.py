"""Backend selection for the hot kernels.

The compiled Cython core is preferred when importable; set
SLIDERGEN_BACKEND=python to force the numpy fallback or
SLIDERGEN_BACKEND=compiled to fail loudly if the extension is missing.
Both backends implement identical contracts (see ``_kernels_np``).
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np

_choice = os.environ.get("SLIDERGEN_BACKEND", "auto")
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"SLIDERGEN_BACKEND must be auto|compiled|python, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise
if _impl is None:
    _impl = _kernels_np

BACKEND: str = "compiled" if _impl is not _kernels_np else "python"

layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
adamw_update = _impl.adamw_update

# Transcendental-heavy activations use numpy's SIMD ufuncs on both
# backends; a compiled scalar loop measured several times slower.
gelu_fwd = _kernels_np.gelu_fwd
gelu_bwd = _kernels_np.gelu_bwd
silu_fwd = _kernels_np.silu_fwd
silu_bwd = _kernels_np.silu_bwd


def attention_fwd(q, k, v, scale: float):
    """Scaled dot-product attention over (batch, heads, seq, head_dim).

    BLAS batched matmuls plus the selected softmax kernel; a fully scalar
    compiled variant measured ~2x slower, so only the softmax rows differ
    between backends.
    """
    s = q.shape[2]
    scores = (q @ k.swapaxes(-1, -2)) * scale
    probs = softmax_fwd(scores.reshape(-1, s)).reshape(scores.shape)
    ctx = probs @ v
    return probs, ctx


def attention_bwd(q, k, v, probs, dctx, scale: float):
    """Gradients (dq, dk, dv) of attention_fwd given d(context)."""
    s = q.shape[2]
    dprobs = dctx @ v.swapaxes(-1, -2)
    dscores = softmax_bwd(
        np.ascontiguousarray(dprobs.reshape(-1, s)), probs.reshape(-1, s)
    ).reshape(probs.shape)
    dq = (dscores @ k) * scale
    dk = (dscores.swapaxes(-1, -2) @ q) * scale
    dv = probs.swapaxes(-1, -2) @ dctx
    return dq, dk, dv


def available_backends() -> dict[str, object]:
    """Importable kernel backends by name, for tests and benchmarks."""
    out: dict[str, object] = {"python": _kernels_np}
    try:
        from . import _core  # type: ignore[attr-defined]

        out["compiled"] = _core
    except ImportError:
        pass
    return out
