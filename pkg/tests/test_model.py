import numpy as np
import pytest

from gradcheck_util import analytic_grads, check_all_tensors, make_probe, perturbed_params
from slidergen.model import (DenoiserConfig, classifier_forward, dit_forward, init_params,
                             load_checkpoint, param_count, save_checkpoint)
from slidergen.training import TrainConfig

MINI = DenoiserConfig(blocks=2, dim=16, heads=4, n_sliders=3, text_len=4,
                      text_token_dim=16, latent_dim=8, n_buckets=5)


def _inputs(cfg, batch, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return (
        rng.standard_normal((batch, cfg.latent_dim)).astype(dtype),
        rng.random((batch, cfg.n_sliders)),
        rng.standard_normal((batch, cfg.text_len, cfg.text_token_dim)).astype(dtype),
        rng.integers(1, 50, batch),
    )


class TestInit:
    def test_same_seed_identical(self):
        p1 = init_params(MINI, 3)
        p2 = init_params(MINI, 3)
        assert p1.keys() == p2.keys()
        for k in p1:
            assert np.array_equal(p1[k], p2[k])

    def test_zero_head_makes_initial_output_input_independent(self):
        params = init_params(MINI, 0)
        c, s, txt, t = _inputs(MINI, 3, seed=1)
        out1 = dit_forward(params, MINI, c, s, txt, t)
        c2, s2, txt2, t2 = _inputs(MINI, 3, seed=2)
        out2 = dit_forward(params, MINI, c2, s2, txt2, t2)
        assert np.array_equal(out1, out2)
        assert np.all(out1 == 0.0)

    def test_param_count_matches_closed_form(self):
        for cfg in (MINI, DenoiserConfig()):
            params = init_params(cfg, 0)
            actual = sum(int(np.prod(a.shape)) for a in params.values())
            assert actual == param_count(cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DenoiserConfig(dim=30)
        with pytest.raises(ValueError):
            DenoiserConfig(dim=64, heads=5)


class TestForward:
    def test_batch_equals_per_sample(self):
        params = perturbed_params(MINI, 4, dtype=np.float32, noise=0.05)
        c, s, txt, t = _inputs(MINI, 2, seed=5)
        full = dit_forward(params, MINI, c, s, txt, t)
        one = np.concatenate([
            dit_forward(params, MINI, c[:1], s[:1], txt[:1], t[:1]),
            dit_forward(params, MINI, c[1:], s[1:], txt[1:], t[1:]),
        ])
        assert np.max(np.abs(full - one)) <= 1e-5

    def test_deterministic(self):
        params = perturbed_params(MINI, 6, dtype=np.float32)
        c, s, txt, t = _inputs(MINI, 4, seed=7)
        assert np.array_equal(dit_forward(params, MINI, c, s, txt, t),
                              dit_forward(params, MINI, c, s, txt, t))

    def test_shape_validation(self):
        params = init_params(MINI, 0)
        c, s, txt, t = _inputs(MINI, 2)
        with pytest.raises(ValueError):
            dit_forward(params, MINI, c[:, :4], s, txt, t)
        with pytest.raises(ValueError):
            dit_forward(params, MINI, c, s[:, :2], txt, t)
        with pytest.raises(ValueError):
            dit_forward(params, MINI, c, s, txt[:, :, :8], t)

    def test_slider_conditioning_changes_output(self):
        params = perturbed_params(MINI, 8, dtype=np.float32)
        c, s, txt, t = _inputs(MINI, 4, seed=9)
        out1 = dit_forward(params, MINI, c, s, txt, t)
        s2 = s.copy()
        s2[:, 1] = np.clip(s2[:, 1] + 0.4, 0, 1)
        out2 = dit_forward(params, MINI, c, s2, txt, t)
        assert np.mean(np.abs(out1 - out2)) > 0


class TestClassifier:
    def test_deterministic_and_shape(self):
        params = init_params(MINI, 10)
        rng = np.random.default_rng(11)
        a = rng.standard_normal((3, MINI.latent_dim)).astype(np.float32)
        b = rng.standard_normal((3, MINI.latent_dim)).astype(np.float32)
        l1 = classifier_forward(params, MINI, a, b)
        l2 = classifier_forward(params, MINI, a, b)
        assert l1.shape == (3, MINI.n_sliders, MINI.n_buckets)
        assert np.array_equal(l1, l2)

    def test_order_matters(self):
        # The decoded difference is signed, so swapping inputs changes logits.
        params = init_params(MINI, 12)
        rng = np.random.default_rng(13)
        a = rng.standard_normal((2, MINI.latent_dim)).astype(np.float32)
        b = rng.standard_normal((2, MINI.latent_dim)).astype(np.float32)
        assert not np.allclose(classifier_forward(params, MINI, a, b),
                               classifier_forward(params, MINI, b, a))

    def test_shape_mismatch_rejected(self):
        params = init_params(MINI, 14)
        with pytest.raises(ValueError):
            classifier_forward(params, MINI, np.zeros((2, 8)), np.zeros((2, 7)))


class TestGradients:
    def test_all_tensors_match_finite_differences(self):
        cfg = TrainConfig(structure_threshold=0.1, n_buckets=MINI.n_buckets)
        report = check_all_tensors(MINI, cfg, batch=4, seed=0, entries_per_tensor=3)
        assert set(report) == set(init_params(MINI, 0))

    def test_classifier_gradient_matches_finite_differences(self):
        cfg = TrainConfig(loss_diffusion=False, loss_structure=False,
                          n_buckets=MINI.n_buckets)
        report = check_all_tensors(MINI, cfg, batch=4, seed=1, entries_per_tensor=3)
        assert all(v <= 1e-3 for v in report.values())

    def test_disentanglement_reaches_denoiser_params(self):
        cfg = TrainConfig(loss_diffusion=False, loss_structure=False,
                          n_buckets=MINI.n_buckets)
        params = perturbed_params(MINI, 2)
        probe = make_probe(MINI, 4, 3)
        grads = analytic_grads(params, MINI, cfg, probe)
        assert np.linalg.norm(grads["blocks.0.attn.wqkv"]) > 0
        assert np.linalg.norm(grads["head.w"]) > 0


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        params = init_params(MINI, 20, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, MINI, world_spec_hash=0xDEADBEEF, step=123,
                        extra={"train": {"schedule_T": 40}})
        back, cfg, header = load_checkpoint(path)
        assert cfg == MINI
        assert header["step"] == 123
        assert header["world_spec_hash"] == 0xDEADBEEF
        assert back.keys() == params.keys()
        for k in params:
            assert np.array_equal(back[k], params[k])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
