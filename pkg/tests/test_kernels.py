"""Cross-backend equivalence for the hot kernels."""

import numpy as np
import pytest

from slidergen import _kernels_np
from slidergen.kernels import BACKEND, available_backends

BACKENDS = available_backends()
needs_compiled = pytest.mark.skipif("compiled" not in BACKENDS,
                                    reason="compiled core not built")


def _rand(shape, dtype, seed):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@needs_compiled
@pytest.mark.parametrize("dtype,rtol", [(np.float32, 1e-5), (np.float64, 1e-12)])
class TestParity:
    def test_layernorm(self, dtype, rtol):
        core = BACKENDS["compiled"]
        x = _rand((64, 48), dtype, 0)
        y_np, r_np = _kernels_np.layernorm_fwd(x)
        y_cy, r_cy = core.layernorm_fwd(x)
        assert np.allclose(y_np, y_cy, rtol=rtol, atol=rtol)
        assert np.allclose(r_np, r_cy, rtol=rtol, atol=rtol)
        dy = _rand((64, 48), dtype, 1)
        dx_np = _kernels_np.layernorm_bwd(dy, y_np, r_np)
        dx_cy = core.layernorm_bwd(dy, y_cy, r_cy)
        assert np.allclose(dx_np, dx_cy, rtol=rtol, atol=rtol)

    def test_softmax(self, dtype, rtol):
        core = BACKENDS["compiled"]
        x = 4.0 * _rand((32, 14), dtype, 2)
        p_np = _kernels_np.softmax_fwd(x)
        p_cy = core.softmax_fwd(x)
        assert np.allclose(p_np, p_cy, rtol=rtol, atol=rtol)
        assert np.allclose(p_cy.sum(-1), 1.0, rtol=1e-5)
        dp = _rand((32, 14), dtype, 3)
        assert np.allclose(_kernels_np.softmax_bwd(dp, p_np), core.softmax_bwd(dp, p_cy),
                           rtol=rtol, atol=rtol)

    def test_gelu_matches_reference_formula(self, dtype, rtol):
        # Shared in-place implementation vs a straightforward transcription.
        x = 3.0 * _rand((40, 33), dtype, 4)
        dy = _rand((40, 33), dtype, 5)
        inner = 0.7978845608028654 * (x + 0.044715 * x ** 3)
        ref = 0.5 * x * (1.0 + np.tanh(inner))
        assert np.allclose(_kernels_np.gelu_fwd(x.copy())[0], ref, rtol=rtol, atol=rtol)
        sig = 1.0 / (1.0 + np.exp(-x))
        assert np.allclose(_kernels_np.silu_fwd(x.copy()), x * sig, rtol=rtol, atol=rtol)
        assert np.allclose(_kernels_np.silu_bwd(x.copy(), dy),
                           dy * sig * (1.0 + x * (1.0 - sig)), rtol=rtol, atol=rtol)

    def test_adamw(self, dtype, rtol):
        core = BACKENDS["compiled"]
        args = dict(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
                    bias_c1=0.4, bias_c2=0.2)
        p1 = _rand((17, 9), dtype, 6)
        p2 = p1.copy()
        g = _rand((17, 9), dtype, 7)
        m1, v1 = np.zeros_like(p1), np.zeros_like(p1)
        m2, v2 = np.zeros_like(p2), np.zeros_like(p2)
        for _ in range(3):
            _kernels_np.adamw_update(p1, g, m1, v1, **args)
            core.adamw_update(p2, g, m2, v2, **args)
        assert np.allclose(p1, p2, rtol=rtol, atol=rtol)
        assert np.allclose(m1, m2, rtol=rtol, atol=rtol)
        assert np.allclose(v1, v2, rtol=rtol, atol=rtol)


def test_backend_reported():
    assert BACKEND in ("compiled", "python")


@needs_compiled
def test_compiled_deterministic_repeat():
    core = BACKENDS["compiled"]
    x = _rand((128, 64), np.float32, 8)
    a, _ = core.layernorm_fwd(x)
    b, _ = core.layernorm_fwd(x)
    assert np.array_equal(a, b)

def test_attention_matches_reference():
    from slidergen import kernels as K

    rng = np.random.default_rng(42)
    q, k, v = (rng.standard_normal((3, 4, 14, 16)) for _ in range(3))
    scale = 0.25
    probs, ctx = K.attention_fwd(q, k, v, scale)
    for b in range(3):
        for h in range(4):
            scores = q[b, h] @ k[b, h].T * scale
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            ref_p = e / e.sum(axis=-1, keepdims=True)
            assert np.allclose(probs[b, h], ref_p, atol=1e-10)
            assert np.allclose(ctx[b, h], ref_p @ v[b, h], atol=1e-10)
