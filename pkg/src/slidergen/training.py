"""Losses, gradient routing, and the optimization loop.

Each step runs the denoiser twice on a shared noisy condition: once with
the data's slider values and once with freshly drawn random values. The
reconstruction loss trains on the first branch only; the bucket
classification loss on decoded value differences flows into the classifier
and both denoiser branches; the structure loss ties the two predictions
together when every attribute difference is inside the threshold.
Reconstruction and structure gradients never touch the classifier.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .diffusion import NoiseSchedule, make_schedule
from .embedding import bucketize
from .errors import NumericError, SpecValidationError
from .model import (DenoiserConfig, classifier_backward, classifier_forward,
                    dit_backward, dit_forward, init_params, is_classifier_param,
                    save_checkpoint)
from .world import Dataset, World

__all__ = [
    "TrainConfig", "LossBreakdown", "diffusion_loss", "disentanglement_loss",
    "structure_loss", "lr_at", "AdamW", "compute_losses", "train_step", "train",
    "TrainResult", "model_config_for", "StepRngs",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    total_steps: int = 20000
    lr_peak: float = 1e-4
    lr_floor: float = 1e-7
    warmup_steps: int = 500
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_buckets: int = 20
    structure_threshold: float = 0.1
    loss_diffusion: bool = True
    loss_disentangle: bool = True
    loss_structure: bool = True
    weight_diffusion: float = 1.0
    weight_disentangle: float = 1.0
    weight_structure: float = 1.0
    schedule_T: int = 100
    schedule_kind: str = "cosine"
    seed: int = 0
    init_seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0     # 0 = final checkpoint only

    def validate(self) -> None:
        if self.warmup_steps >= self.total_steps:
            raise SpecValidationError(
                f"warmup_steps {self.warmup_steps} must be < total_steps {self.total_steps}")
        if not (0.0 < self.structure_threshold <= 1.0):
            raise SpecValidationError(
                f"structure_threshold must be in (0, 1], got {self.structure_threshold}")
        if self.n_buckets < 2:
            raise SpecValidationError(f"n_buckets must be >= 2, got {self.n_buckets}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise SpecValidationError("batch_size and total_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        return TrainConfig(**raw)


@dataclass(frozen=True)
class LossBreakdown:
    diffusion: float
    disentanglement: float
    structure: float
    total: float
    gate_rate: float


def diffusion_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over every component."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def disentanglement_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Cross-entropy over bucket logits, averaged over attributes (and batch).

    logits: (..., N, B), labels: (..., N) integer bucket indices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    n_buckets = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_buckets):
        raise ValueError(f"label out of range [0, {n_buckets})")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def structure_loss(out_orig: np.ndarray, out_rand: np.ndarray, delta_v: np.ndarray,
                   threshold: float) -> float:
    """Gated proximity penalty for one prediction pair.

    Active only when every attribute difference satisfies |dv_i| <= threshold;
    then it is the mean squared difference of the two predictions, else 0.
    """
    out_orig = np.asarray(out_orig)
    out_rand = np.asarray(out_rand)
    if out_orig.shape != out_rand.shape:
        raise ValueError(f"shape mismatch {out_orig.shape} vs {out_rand.shape}")
    if np.max(np.abs(delta_v)) > threshold:
        return 0.0
    diff = out_orig.astype(np.float64) - out_rand.astype(np.float64)
    return float(np.mean(diff * diff))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + np.cos(np.pi * frac))


class AdamW:
    """Decoupled weight-decay Adam over a parameter dict, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.cfg.beta1 ** self.step_count
        c2 = 1.0 - self.cfg.beta2 ** self.step_count
        for name, grad in grads.items():
            K.adamw_update(params[name], grad, self.m[name], self.v[name],
                           lr, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps,
                           self.cfg.weight_decay, c1, c2)


@dataclass
class StepRngs:
    """Independent per-purpose streams so ablation flags never shift the data."""

    batch: np.random.Generator
    vstar: np.random.Generator
    timestep: np.random.Generator
    noise: np.random.Generator

    @staticmethod
    def from_seed(seed: int) -> "StepRngs":
        children = np.random.SeedSequence(seed).spawn(4)
        return StepRngs(*(np.random.default_rng(s) for s in children))


def compute_losses(params: dict, model_cfg: DenoiserConfig, cfg: TrainConfig,
                   c_t: np.ndarray, c0: np.ndarray, sliders: np.ndarray,
                   v_star: np.ndarray, text: np.ndarray, t: np.ndarray,
                   want_grads: bool = True):
    """Dual-branch forward pass, the three losses, and (optionally) all grads.

    Both branches share the noisy condition, text tokens and timestep; only
    the slider tokens differ. Classifier parameters receive gradient from
    the disentanglement term alone.
    """
    B = c0.shape[0]
    D = model_cfg.latent_dim
    dtype = params["head.w"].dtype

    c_t2 = np.concatenate([c_t, c_t], axis=0)
    sliders2 = np.concatenate([sliders, v_star], axis=0)
    text2 = np.concatenate([text, text], axis=0)
    t2 = np.concatenate([t, t])
    if want_grads:
        out2, cache = dit_forward(params, model_cfg, c_t2, sliders2, text2, t2,
                                  want_cache=True)
    else:
        out2, cache = dit_forward(params, model_cfg, c_t2, sliders2, text2, t2), None
    out_o, out_r = out2[:B], out2[B:]

    delta_v = sliders - v_star
    gate = np.max(np.abs(delta_v), axis=-1) <= cfg.structure_threshold
    gate_rate = float(gate.mean())

    # Breakdown entries are the weighted contributions of enabled terms, so
    # total always equals their sum, ablated or not.
    dout = np.zeros_like(out2)
    loss_diff = 0.0
    if cfg.loss_diffusion:
        loss_diff = cfg.weight_diffusion * diffusion_loss(out_o, c0)
        dout[:B] += (cfg.weight_diffusion * 2.0 / (B * D)) * (out_o - c0)

    loss_st = 0.0
    if cfg.loss_structure:
        pair_diff = out_o.astype(np.float64) - out_r.astype(np.float64)
        per_sample = np.mean(pair_diff * pair_diff, axis=-1)
        loss_st = cfg.weight_structure * float(np.mean(gate * per_sample))
        gst = (cfg.weight_structure * 2.0 / (B * D)) * gate[:, None] * (out_o - out_r)
        dout[:B] += gst
        dout[B:] -= gst

    loss_clss = 0.0
    clf_grads: dict[str, np.ndarray] = {}
    if cfg.loss_disentangle:
        labels = bucketize(np.clip(delta_v, -1.0, 1.0), cfg.n_buckets)
        logits, clf_cache = classifier_forward(params, model_cfg, out_o, out_r, want_cache=True)
        loss_clss = cfg.weight_disentangle * disentanglement_loss(logits, labels)
        if want_grads:
            probs = K.softmax_fwd(
                np.ascontiguousarray(logits.reshape(-1, cfg.n_buckets), dtype=dtype)
            ).reshape(logits.shape)
            dlogits = probs.copy()
            rows = np.arange(B)[:, None]
            cols = np.arange(model_cfg.n_sliders)[None, :]
            dlogits[rows, cols, labels] -= 1.0
            dlogits *= cfg.weight_disentangle / (B * model_cfg.n_sliders)
            clf_grads, d_a, d_b = classifier_backward(params, model_cfg, clf_cache, dlogits)
            dout[:B] += d_a
            dout[B:] += d_b

    total = loss_diff + loss_clss + loss_st
    breakdown = LossBreakdown(
        diffusion=loss_diff, disentanglement=loss_clss, structure=loss_st,
        total=float(total), gate_rate=gate_rate)
    if not want_grads:
        return breakdown, None
    grads = dit_backward(params, model_cfg, cache, dout)
    grads.update(clf_grads)
    return breakdown, grads


def train_step(params: dict, opt: AdamW, batch: dict, model_cfg: DenoiserConfig,
               cfg: TrainConfig, sched: NoiseSchedule, rngs: StepRngs,
               lr: float) -> tuple[dict, LossBreakdown]:
    """One optimizer update on one batch; returns the mutated params."""
    c0 = batch["latent"]
    sliders = batch["sliders"]
    text = batch["text_tokens"]
    B = c0.shape[0]
    dtype = params["head.w"].dtype

    v_star = rngs.vstar.random((B, model_cfg.n_sliders))
    t = rngs.timestep.integers(1, sched.T + 1, B)
    eps = rngs.noise.standard_normal((B, model_cfg.latent_dim)).astype(dtype)
    ab = sched.alpha_bar[t][:, None]
    c_t = (np.sqrt(ab) * c0 + np.sqrt(1.0 - ab) * eps).astype(dtype)

    breakdown, grads = compute_losses(params, model_cfg, cfg, c_t, c0, sliders,
                                      v_star, text, t)
    if not np.isfinite(breakdown.total):
        raise NumericError(
            f"non-finite loss at optimizer step {opt.step_count + 1}: {breakdown}")
    opt.update(params, grads, lr)
    return params, breakdown


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    params: dict[str, np.ndarray]
    model_cfg: DenoiserConfig
    final_losses: LossBreakdown
    wall_seconds: float


def model_config_for(world: World, cfg: TrainConfig, blocks: int = 2, dim: int = 64,
                     heads: int = 4) -> DenoiserConfig:
    """Denoiser config whose token shapes follow the world."""
    spec = world.spec
    return DenoiserConfig(
        blocks=blocks, dim=dim, heads=heads, n_sliders=spec.n_attributes,
        text_len=spec.text_len, text_token_dim=spec.token_dim,
        latent_dim=spec.latent_dim, n_buckets=cfg.n_buckets)


def train(world: World, dataset: Dataset, model_cfg: DenoiserConfig, cfg: TrainConfig,
          out_dir, run_name: str = "run") -> TrainResult:
    """Full training loop: seeded, logged, checkpointed.

    The dataset spec hash must match the world. Metrics are appended as
    newline-delimited JSON; checkpoints carry the model config, the world
    spec hash, and the training config snapshot.
    """
    cfg.validate()
    spec = world.spec
    if dataset.spec_hash != spec.hash():
        raise SpecValidationError(
            f"dataset spec hash {dataset.spec_hash:#x} != world spec hash {spec.hash():#x}")
    if (model_cfg.n_sliders, model_cfg.latent_dim) != (spec.n_attributes, spec.latent_dim):
        raise SpecValidationError("model config does not match world dimensions")
    if (model_cfg.text_len, model_cfg.text_token_dim) != (spec.text_len, spec.token_dim):
        raise SpecValidationError("model text token shape does not match world")
    if model_cfg.n_buckets != cfg.n_buckets:
        raise SpecValidationError("model and training bucket counts differ")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"{run_name}.ckpt"
    metrics_path = out_dir / f"{run_name}.metrics.ndjson"

    sched = make_schedule(cfg.schedule_T, cfg.schedule_kind)
    params = init_params(model_cfg, cfg.init_seed, np.float32)
    opt = AdamW(params, cfg)
    rngs = StepRngs.from_seed(cfg.seed)

    latents = dataset.latent.astype(np.float32)
    sliders = dataset.sliders.astype(np.float64)
    prompt = dataset.prompt_class.astype(np.int64)
    table = world.token_table.astype(np.float32)
    n_records = len(dataset)

    extra = {"train": cfg.to_dict(), "dataset_sigma": dataset.sigma,
             "dataset_seed": dataset.data_seed}
    start = time.perf_counter()
    last: LossBreakdown | None = None
    with open(metrics_path, "w") as log:
        for step in range(cfg.total_steps):
            idx = rngs.batch.integers(0, n_records, cfg.batch_size)
            batch = {
                "latent": latents[idx],
                "sliders": sliders[idx],
                "text_tokens": table[prompt[idx]],
            }
            lr = lr_at(step, cfg)
            params, last = train_step(params, opt, batch, model_cfg, cfg, sched, rngs, lr)
            if step % cfg.log_interval == 0 or step == cfg.total_steps - 1:
                log.write(json.dumps({
                    "step": step, "lr": lr, "diffusion": last.diffusion,
                    "disentanglement": last.disentanglement, "structure": last.structure,
                    "total": last.total, "gate_rate": last.gate_rate,
                }) + "\n")
                log.flush()
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"{run_name}.step{step + 1}.ckpt", params,
                                model_cfg, spec.hash(), step + 1, extra)
    save_checkpoint(ckpt_path, params, model_cfg, spec.hash(), cfg.total_steps, extra)
    return TrainResult(
        checkpoint_path=ckpt_path, metrics_path=metrics_path, params=params,
        model_cfg=model_cfg, final_losses=last, wall_seconds=time.perf_counter() - start)
