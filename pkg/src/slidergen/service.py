"""Stateless inference service: schema, single and batched generation.

The checkpoint and world are loaded once and never mutated; every request
carries its own seed, so identical requests produce identical responses
regardless of concurrency or batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .diffusion import SamplerConfig, make_schedule, sample, sample_noise_pack, timestep_subsequence
from .errors import NumericError, SpecValidationError
from .model import DenoiserConfig, load_checkpoint, make_denoiser
from .render import render
from .world import World, WorldSpec, build_world, read_attributes, read_identity

DEFAULT_MAX_BATCH = 64


class GenerateRequest(BaseModel):
    prompt_class: int
    sliders: list[float]
    seed: int
    steps: int | None = None


class BatchGenerateRequest(BaseModel):
    requests: list[GenerateRequest]


def _reject(field: str, message: str):
    err = SpecValidationError(message)
    err.field = field
    raise err


@dataclass
class InferenceEngine:
    world: World
    params: dict
    model_cfg: DenoiserConfig
    sched: "object"
    model_step: int

    @staticmethod
    def from_files(checkpoint_path, world_path) -> "InferenceEngine":
        params, cfg, header = load_checkpoint(checkpoint_path)
        spec = WorldSpec.load(world_path)
        if spec.hash() != header["world_spec_hash"]:
            raise SpecValidationError(
                f"world spec hash {spec.hash():#x} does not match checkpoint "
                f"{header['world_spec_hash']:#x}")
        world = build_world(spec)
        train_extra = header.get("extra", {}).get("train", {})
        sched = make_schedule(train_extra.get("schedule_T", 100),
                              train_extra.get("schedule_kind", "cosine"))
        return InferenceEngine(world=world, params=params, model_cfg=cfg,
                               sched=sched, model_step=header["step"])

    def validate(self, req: GenerateRequest) -> None:
        spec = self.world.spec
        if not (0 <= req.prompt_class < spec.n_prompt_classes):
            _reject("prompt_class",
                    f"prompt_class must be in [0, {spec.n_prompt_classes}), got {req.prompt_class}")
        if len(req.sliders) != spec.n_attributes:
            _reject("sliders",
                    f"expected {spec.n_attributes} slider values, got {len(req.sliders)}")
        arr = np.asarray(req.sliders, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            _reject("sliders", f"slider values must be finite and in [0, 1], got {req.sliders}")
        if req.seed < 0:
            _reject("seed", f"seed must be a non-negative integer, got {req.seed}")
        if req.steps is not None and not (1 <= req.steps <= self.sched.T):
            _reject("steps", f"steps must be in [1, {self.sched.T}], got {req.steps}")

    def generate(self, req: GenerateRequest) -> dict:
        self.validate(req)
        spec = self.world.spec
        sliders = np.asarray(req.sliders, dtype=np.float64)[None, :]
        text = self.world.token_table[req.prompt_class][None].astype(np.float32)
        denoiser = make_denoiser(self.params, self.model_cfg, sliders, text)
        n_steps = len(timestep_subsequence(self.sched.T, req.steps))
        c_init, zs = sample_noise_pack(req.seed, n_steps, spec.latent_dim)
        latent = sample(denoiser, self.sched, SamplerConfig(steps=req.steps),
                        spec.latent_dim, batch=1, noise=(c_init, zs[:, None, :]))[0]
        measured = read_attributes(self.world, latent, req.prompt_class)
        identity = read_identity(self.world, latent, req.prompt_class)
        return {
            "latent": [float(x) for x in latent],
            "measured_attributes": [float(x) for x in measured],
            "identity": [float(x) for x in identity],
            "render": render(self.world, latent, req.prompt_class),
            "model_step": self.model_step,
        }


def create_app(engine: InferenceEngine, max_batch: int = DEFAULT_MAX_BATCH,
               cors_origins: list[str] | None = None) -> FastAPI:
    app = FastAPI(title="slidergen inference service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(SpecValidationError)
    async def _validation_handler(request: Request, exc: SpecValidationError):
        return JSONResponse(status_code=422, content={
            "detail": str(exc), "field": getattr(exc, "field", None)})

    @app.exception_handler(NumericError)
    async def _numeric_handler(request: Request, exc: NumericError):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model_step": engine.model_step}

    @app.get("/schema")
    def schema():
        spec = engine.world.spec
        return {
            "attributes": engine.world.attribute_names,
            "n_attributes": spec.n_attributes,
            "prompt_classes": engine.world.prompt_class_names,
            "n_prompt_classes": spec.n_prompt_classes,
            "latent_dim": spec.latent_dim,
            "identity_dim": spec.identity_dim,
            "max_steps": engine.sched.T,
            "max_batch": max_batch,
            "model_step": engine.model_step,
        }

    @app.post("/generate")
    def generate(req: GenerateRequest):
        return engine.generate(req)

    @app.post("/batch-generate")
    def batch_generate(batch: BatchGenerateRequest):
        if len(batch.requests) > max_batch:
            return JSONResponse(status_code=413, content={
                "detail": f"batch size {len(batch.requests)} exceeds maximum {max_batch}"})
        return {"responses": [engine.generate(r) for r in batch.requests]}

    return app


def serve(checkpoint_path, world_path, host: str = "127.0.0.1", port: int = 8123,
          max_batch: int = DEFAULT_MAX_BATCH, cors_origins: list[str] | None = None):
    """Blocking entrypoint used by the CLI."""
    import uvicorn

    engine = InferenceEngine.from_files(checkpoint_path, world_path)
    app = create_app(engine, max_batch=max_batch, cors_origins=cors_origins)
    uvicorn.run(app, host=host, port=port, log_level="warning")
