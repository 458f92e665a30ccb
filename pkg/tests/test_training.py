import hashlib
import json
import math

import numpy as np
import pytest

from gradcheck_util import analytic_grads, make_probe, perturbed_params
from slidergen.diffusion import make_schedule
from slidergen.errors import SpecValidationError
from slidergen.model import DenoiserConfig, init_params
from slidergen.training import (AdamW, StepRngs, TrainConfig, compute_losses,
                                diffusion_loss, disentanglement_loss, lr_at,
                                model_config_for, structure_loss, train, train_step)
from slidergen.world import WorldSpec, build_world, generate_dataset

MINI = DenoiserConfig(blocks=2, dim=16, heads=4, n_sliders=3, text_len=4,
                      text_token_dim=16, latent_dim=8, n_buckets=5)


class TestDiffusionLoss:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).standard_normal(16)
        assert diffusion_loss(x, x) == 0.0

    def test_all_ones_offset_gives_one(self):
        x = np.random.default_rng(1).standard_normal((4, 8))
        assert abs(diffusion_loss(x + 1.0, x) - 1.0) < 1e-12

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal(24), rng.standard_normal(24)
        expect = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / 24
        assert abs(diffusion_loss(a, b) - expect) <= 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            diffusion_loss(np.zeros(3), np.zeros(4))


class TestDisentanglementLoss:
    def test_uniform_logits_equal_log_b(self):
        logits = np.zeros((7, 5, 20))
        labels = np.random.default_rng(3).integers(0, 20, (7, 5))
        assert abs(disentanglement_loss(logits, labels) - math.log(20)) < 1e-9

    def test_confident_correct_logits_near_zero(self):
        labels = np.array([[3, 0, 19]])
        logits = np.zeros((1, 3, 20))
        for i, y in enumerate(labels[0]):
            logits[0, i, y] = 10.0
        assert disentanglement_loss(logits, labels) <= 1e-3

    def test_delta_example_labels(self):
        from slidergen.embedding import bucketize
        delta = np.array([0.3, -0.5, 0.0, 0.0, 0.0])
        assert list(bucketize(delta, 20)) == [13, 5, 10, 10, 10]

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            disentanglement_loss(np.zeros((1, 2, 5)), np.array([[0, 5]]))


class TestStructureLoss:
    def test_identical_outputs_zero(self):
        x = np.random.default_rng(4).standard_normal(8)
        assert structure_loss(x, x, np.zeros(3), 0.1) == 0.0

    def test_gated_off_above_threshold(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        assert structure_loss(a, b, np.array([0.2, 0.0, 0.0]), 0.1) == 0.0

    def test_gate_on_closed_form(self):
        a = np.zeros(8)
        b = np.full(8, 0.1)
        assert abs(structure_loss(a, b, np.array([0.05, -0.05]), 0.1) - 0.01) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            structure_loss(np.zeros(3), np.zeros(4), np.zeros(2), 0.1)


class TestLrSchedule:
    CFG = TrainConfig(total_steps=20000, warmup_steps=500, lr_peak=1e-4, lr_floor=1e-7)

    def test_peak_at_end_of_warmup(self):
        assert abs(lr_at(500, self.CFG) - 1e-4) < 1e-15

    def test_floor_at_final_step(self):
        assert abs(lr_at(20000, self.CFG) - 1e-7) < 1e-15

    def test_cosine_midpoint(self):
        mid = (500 + 20000) // 2
        # Midpoint of the cosine span lands halfway between peak and floor.
        span = 20000 - 500
        frac = (mid - 500) / span
        expect = 1e-7 + 0.5 * (1e-4 - 1e-7) * (1 + math.cos(math.pi * frac))
        assert abs(lr_at(mid, self.CFG) - expect) < 1e-9
        exact_mid = 500 + span / 2
        val = 1e-7 + 0.5 * (1e-4 - 1e-7) * (1 + math.cos(math.pi * 0.5))
        assert abs(val - (1e-4 + 1e-7) / 2) < 1e-9

    def test_warmup_linear_from_near_zero(self):
        assert abs(lr_at(0, self.CFG) - 1e-4 / 500) < 1e-15
        assert lr_at(250, self.CFG) < lr_at(499, self.CFG) <= 1e-4

    def test_range_errors(self):
        with pytest.raises(ValueError):
            lr_at(-1, self.CFG)
        with pytest.raises(ValueError):
            lr_at(20001, self.CFG)


def _mini_probe_losses(flags: dict, seed=0, tau=0.5):
    cfg = TrainConfig(n_buckets=MINI.n_buckets, structure_threshold=tau, **flags)
    params = perturbed_params(MINI, seed)
    probe = make_probe(MINI, 8, seed + 5)
    breakdown, grads = compute_losses(params, MINI, cfg, probe["c_t"], probe["c0"],
                                      probe["sliders"], probe["v_star"], probe["text"],
                                      probe["t"])
    return breakdown, grads


class TestLossAssembly:
    def test_total_is_sum_of_components(self):
        breakdown, _ = _mini_probe_losses({})
        s = breakdown.diffusion + breakdown.disentanglement + breakdown.structure
        assert abs(breakdown.total - s) <= 1e-6
        assert breakdown.diffusion >= 0 and breakdown.structure >= 0
        assert breakdown.disentanglement >= 0

    def test_routing_reconstruction_and_structure_never_touch_classifier(self):
        _, grads = _mini_probe_losses({"loss_disentangle": False})
        clf_keys = [k for k in grads if k.startswith("clf.")]
        assert clf_keys == []

    def test_disentanglement_reaches_both_networks(self):
        _, grads = _mini_probe_losses({"loss_diffusion": False, "loss_structure": False})
        assert np.linalg.norm(grads["clf.w1"]) > 0
        assert np.linalg.norm(grads["blocks.1.mlp.w1"]) > 0

    def test_ablated_terms_report_zero(self):
        breakdown, _ = _mini_probe_losses(
            {"loss_disentangle": False, "loss_structure": False})
        assert breakdown.disentanglement == 0.0
        assert breakdown.structure == 0.0
        assert breakdown.total == breakdown.diffusion

    def test_initial_ce_near_uniform_floor(self):
        cfg = TrainConfig(n_buckets=MINI.n_buckets)
        params = init_params(MINI, 0, np.float64)
        probe = make_probe(MINI, 16, 9)
        breakdown, _ = compute_losses(params, MINI, cfg, probe["c_t"], probe["c0"],
                                      probe["sliders"], probe["v_star"], probe["text"],
                                      probe["t"], want_grads=False)
        assert breakdown.disentanglement <= math.log(MINI.n_buckets) + 0.5


class TestGateRate:
    def test_empirical_rate_matches_analytic_value(self):
        # Monte Carlo oracle vs closed form (2 tau - tau^2)^N for uniform pairs.
        rng = np.random.default_rng(11)
        n = 5
        for tau in (0.5, 0.3, 0.1):
            v = rng.random((2_000_000, n))
            v_star = rng.random((2_000_000, n))
            emp = float(np.mean(np.max(np.abs(v - v_star), axis=1) <= tau))
            analytic = (2 * tau - tau * tau) ** n
            assert abs(emp - analytic) / analytic <= 0.2

    def test_train_step_reports_gate_rate(self, small_world):
        rng = np.random.default_rng(12)
        cfg = TrainConfig(batch_size=512, structure_threshold=0.5, schedule_T=10,
                          total_steps=10, warmup_steps=1, n_buckets=20)
        mcfg = model_config_for(small_world, cfg, blocks=1, dim=16, heads=4)
        sched = make_schedule(10)
        params = init_params(mcfg, 0, np.float32)
        opt = AdamW(params, cfg)
        rngs = StepRngs.from_seed(3)
        spec = small_world.spec
        rates = []
        for _ in range(8):
            batch = {
                "latent": rng.standard_normal((512, spec.latent_dim)).astype(np.float32),
                "sliders": rng.random((512, spec.n_attributes)),
                "text_tokens": small_world.token_table[
                    rng.integers(0, spec.n_prompt_classes, 512)].astype(np.float32),
            }
            _, bd = train_step(params, opt, batch, mcfg, cfg, sched, rngs, 1e-4)
            rates.append(bd.gate_rate)
        analytic = (2 * 0.5 - 0.25) ** spec.n_attributes
        assert abs(np.mean(rates) - analytic) / analytic <= 0.2


@pytest.fixture(scope="module")
def train_world(tmp_path_factory):
    spec = WorldSpec(n_attributes=3, latent_dim=16, n_prompt_classes=4, identity_dim=4,
                     text_len=4, token_dim=16, world_seed=21)
    world = build_world(spec)
    path = tmp_path_factory.mktemp("train_world") / "d.csw"
    dataset = generate_dataset(world, 3000, path, rng_seed=2)
    return world, dataset


class TestTrainLoop:
    def _cfg(self, steps=40, **kw):
        return TrainConfig(batch_size=32, total_steps=steps, warmup_steps=5,
                           schedule_T=10, log_interval=10, seed=9, init_seed=9, **kw)

    def test_two_runs_identical_checkpoint_hash(self, train_world, tmp_path):
        world, dataset = train_world
        cfg = self._cfg()
        mcfg = model_config_for(world, cfg, blocks=1, dim=16, heads=4)
        r1 = train(world, dataset, mcfg, cfg, tmp_path / "a", run_name="r")
        r2 = train(world, dataset, mcfg, cfg, tmp_path / "b", run_name="r")
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert h(r1.checkpoint_path) == h(r2.checkpoint_path)

    def test_metrics_log_parses_and_has_lr(self, train_world, tmp_path):
        world, dataset = train_world
        cfg = self._cfg()
        mcfg = model_config_for(world, cfg, blocks=1, dim=16, heads=4)
        res = train(world, dataset, mcfg, cfg, tmp_path / "m", run_name="r")
        rows = [json.loads(l) for l in res.metrics_path.read_text().splitlines()]
        assert rows[0]["step"] == 0
        assert {"step", "lr", "diffusion", "disentanglement", "structure", "total",
                "gate_rate"} <= set(rows[0])

    def test_ablation_flags_keep_classifier_frozen(self, train_world, tmp_path):
        world, dataset = train_world
        cfg = self._cfg(loss_disentangle=False, loss_structure=False)
        mcfg = model_config_for(world, cfg, blocks=1, dim=16, heads=4)
        init = init_params(mcfg, cfg.init_seed, np.float32)
        res = train(world, dataset, mcfg, cfg, tmp_path / "f", run_name="r")
        for name in res.params:
            if name.startswith("clf."):
                assert np.array_equal(res.params[name], init[name])
        assert res.final_losses.disentanglement == 0.0
        assert res.final_losses.structure == 0.0

    def test_dataset_world_hash_mismatch_rejected(self, train_world, tmp_path):
        world, dataset = train_world
        other = build_world(WorldSpec(n_attributes=3, latent_dim=16, n_prompt_classes=4,
                                      identity_dim=4, text_len=4, token_dim=16,
                                      world_seed=99))
        cfg = self._cfg()
        mcfg = model_config_for(other, cfg, blocks=1, dim=16, heads=4)
        with pytest.raises(SpecValidationError, match="hash"):
            train(other, dataset, mcfg, cfg, tmp_path / "x", run_name="r")

    def test_periodic_checkpointing(self, train_world, tmp_path):
        world, dataset = train_world
        cfg = self._cfg(steps=20, checkpoint_interval=10)
        mcfg = model_config_for(world, cfg, blocks=1, dim=16, heads=4)
        train(world, dataset, mcfg, cfg, tmp_path / "p", run_name="r")
        assert (tmp_path / "p" / "r.step10.ckpt").exists()
        assert (tmp_path / "p" / "r.step20.ckpt").exists()

    def test_config_validation(self):
        with pytest.raises(SpecValidationError):
            TrainConfig(warmup_steps=10, total_steps=5).validate()
        with pytest.raises(SpecValidationError):
            TrainConfig(structure_threshold=0.0).validate()
        with pytest.raises(SpecValidationError):
            TrainConfig(n_buckets=1).validate()


@pytest.mark.slow
def test_diffusion_loss_decreases_on_default_config(tmp_path):
    # Mean logged reconstruction loss over the last tenth of a 1000-step run
    # must undercut the first tenth at the default desk dimensions.
    spec = WorldSpec(world_seed=5)
    world = build_world(spec)
    dataset = generate_dataset(world, 10000, tmp_path / "d.csw", rng_seed=6)
    cfg = TrainConfig(total_steps=1000, log_interval=10, seed=4, init_seed=4)
    mcfg = model_config_for(world, cfg)
    res = train(world, dataset, mcfg, cfg, tmp_path / "run", run_name="r")
    rows = [json.loads(l) for l in res.metrics_path.read_text().splitlines()]
    early = np.mean([r["diffusion"] for r in rows if r["step"] < 100])
    late = np.mean([r["diffusion"] for r in rows if 900 <= r["step"] < 1000])
    assert late < early
