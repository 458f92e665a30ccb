"""Sweep protocol and the four slider-quality metrics.

For every prompt and every attribute, the target slider is swept across a
value grid while the others stay at a fixed baseline, re-using the same
noise stream per prompt so the only varying input is the slider itself.
The world's exact read-outs then score each generated latent:

- continuity: fraction of ordered value pairs whose target scores increase,
- scope: mean score difference between the extreme slider values,
- consistency: fraction of sweep lines whose identity read-outs all stay
  within a max-norm threshold of each other,
- entanglement: fraction of lines where any untouched attribute's score
  range exceeds a tolerance.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffusion import (NoiseSchedule, SamplerConfig, make_schedule, sample,
                        sample_noise_pack, timestep_subsequence)
from .errors import SpecValidationError
from .model import DenoiserConfig, load_checkpoint, make_denoiser
from .world import World, encode_latent, read_attributes, read_identity

DEFAULT_IDENTITY_DELTA = 0.1
DEFAULT_ENTANGLE_EPSILON = 0.1


@dataclass(frozen=True)
class SweepProtocol:
    n_prompts: int = 50
    values: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    baseline: float = 0.5
    seed_base: int = 0
    sampler_steps: int | None = None
    continuity_pairs: str = "all"   # or "adjacent"

    def validate(self) -> None:
        if len(self.values) < 2:
            raise SpecValidationError("protocol needs at least 2 slider values")
        if list(self.values) != sorted(self.values):
            raise SpecValidationError("protocol values must be ascending")
        if self.n_prompts < 1:
            raise SpecValidationError("n_prompts must be >= 1")
        if self.continuity_pairs not in ("all", "adjacent"):
            raise SpecValidationError(f"unknown pair mode {self.continuity_pairs!r}")

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["values"] = list(raw["values"])
        return raw


@dataclass
class SweepLine:
    """One prompt x one target attribute, swept over the value grid."""

    prompt_index: int
    prompt_class: int
    seed: int
    target_attr: int
    values: tuple[float, ...]
    measured: np.ndarray    # (V, N) oracle attribute scores
    identity: np.ndarray    # (V, K) oracle identity read-outs
    latents: np.ndarray     # (V, D)


@dataclass
class SweepResults:
    protocol: SweepProtocol
    n_attributes: int
    lines: list[SweepLine]


def run_sweep(world: World, protocol: SweepProtocol, denoiser_factory,
              sched: NoiseSchedule) -> SweepResults:
    """Generate every sweep cell and score it with the oracle.

    ``denoiser_factory(sliders, prompt_classes)`` must return a batch
    denoiser fn(c_t, t) for those fixed conditions. All cells of one prompt
    share one seeded noise stream, so cells differ only through their
    slider conditioning.
    """
    protocol.validate()
    spec = world.spec
    n, v = spec.n_attributes, len(protocol.values)
    n_cells = protocol.n_prompts * n * v
    d = spec.latent_dim

    sliders = np.full((n_cells, n), protocol.baseline, dtype=np.float64)
    prompt_cls = np.empty(n_cells, dtype=np.int64)
    cell = 0
    for j in range(protocol.n_prompts):
        for i in range(n):
            for k, val in enumerate(protocol.values):
                sliders[cell, i] = val
                prompt_cls[cell] = j % spec.n_prompt_classes
                cell += 1

    t_seq = timestep_subsequence(sched.T, protocol.sampler_steps)
    c_init = np.empty((n_cells, d))
    zs = np.empty((len(t_seq), n_cells, d))
    per_prompt = n * v
    for j in range(protocol.n_prompts):
        ci, z = sample_noise_pack(protocol.seed_base + j, len(t_seq), d)
        sl = slice(j * per_prompt, (j + 1) * per_prompt)
        c_init[sl] = ci
        zs[:, sl] = z[:, None, :]

    denoiser = denoiser_factory(sliders, prompt_cls)
    cfg = SamplerConfig(steps=protocol.sampler_steps)
    latents = sample(denoiser, sched, cfg, d, batch=n_cells, noise=(c_init, zs))

    measured = read_attributes(world, latents, prompt_cls)
    identity = read_identity(world, latents, prompt_cls)

    lines: list[SweepLine] = []
    cell = 0
    for j in range(protocol.n_prompts):
        for i in range(n):
            sl = slice(cell, cell + v)
            lines.append(SweepLine(
                prompt_index=j, prompt_class=int(prompt_cls[cell]),
                seed=protocol.seed_base + j, target_attr=i,
                values=tuple(protocol.values),
                measured=measured[sl], identity=identity[sl], latents=latents[sl]))
            cell += v
    return SweepResults(protocol=protocol, n_attributes=n, lines=lines)


def checkpoint_denoiser_factory(params: dict, cfg: DenoiserConfig, world: World):
    """Denoiser factory backed by trained parameters."""
    table = world.token_table.astype(params["head.w"].dtype)

    def factory(sliders: np.ndarray, prompt_classes: np.ndarray):
        return make_denoiser(params, cfg, sliders, table[prompt_classes])

    return factory


def oracle_denoiser_factory(world: World, identity_seed: int = 1234):
    """Ideal generator: always returns the exact latent for its conditioning.

    Identities are fixed per prompt class, so sweeps are perfectly
    consistent and the metrics hit their ideal values.
    """
    spec = world.spec
    rng = np.random.default_rng(identity_seed)
    identities = rng.uniform(-1.0, 1.0, (spec.n_prompt_classes, spec.identity_dim))

    def factory(sliders: np.ndarray, prompt_classes: np.ndarray):
        target = encode_latent(world, sliders, identities[prompt_classes], prompt_classes)

        def denoiser(c_t: np.ndarray, t: np.ndarray) -> np.ndarray:
            return target

        return denoiser

    return factory


def _line_pairs(n_values: int, mode: str):
    if mode == "adjacent":
        return [(k, k + 1) for k in range(n_values - 1)]
    return list(itertools.combinations(range(n_values), 2))


def continuity(results: SweepResults) -> float:
    """Percent of ordered value pairs with strictly increasing target score."""
    mode = results.protocol.continuity_pairs
    correct = total = 0
    for line in results.lines:
        s = line.measured[:, line.target_attr]
        for k, l in _line_pairs(len(line.values), mode):
            correct += bool(s[l] > s[k])
            total += 1
    return 100.0 * correct / total


def scope(results: SweepResults) -> float:
    """Mean target-score difference between the extreme slider values, x100."""
    diffs = [line.measured[-1, line.target_attr] - line.measured[0, line.target_attr]
             for line in results.lines]
    return 100.0 * float(np.mean(diffs))


def consistency(results: SweepResults, delta: float = DEFAULT_IDENTITY_DELTA) -> float:
    """Percent of lines whose identities stay pairwise within max-norm delta."""
    if delta <= 0:
        raise SpecValidationError(f"delta must be > 0, got {delta}")
    ok = 0
    for line in results.lines:
        ids = line.identity
        spread = np.max(np.abs(ids[:, None, :] - ids[None, :, :]))
        ok += bool(spread <= delta)
    return 100.0 * ok / len(results.lines)


def entanglement(results: SweepResults, epsilon: float = DEFAULT_ENTANGLE_EPSILON) -> float:
    """Percent of lines where some untouched attribute moved more than epsilon."""
    if epsilon <= 0:
        raise SpecValidationError(f"epsilon must be > 0, got {epsilon}")
    entangled = 0
    for line in results.lines:
        others = np.delete(line.measured, line.target_attr, axis=1)
        ranges = others.max(axis=0) - others.min(axis=0)
        entangled += bool(np.any(ranges > epsilon))
    return 100.0 * entangled / len(results.lines)


@dataclass
class MetricsReport:
    schema_version: int
    continuity: float
    scope: float
    consistency: float
    entanglement: float
    identity_delta: float
    entangle_epsilon: float
    n_lines: int
    n_cells: int
    n_pairs: int
    per_attribute: list[dict]
    protocol: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        return MetricsReport(**json.loads(text))

    def to_text(self) -> str:
        header = f"{'':<12}{'Cont.%':>9}{'Cons.%':>9}{'Scope%':>9}{'Entang.%':>10}"
        rows = [header, "-" * len(header)]
        rows.append(f"{'overall':<12}{self.continuity:>9.2f}{self.consistency:>9.2f}"
                    f"{self.scope:>9.2f}{self.entanglement:>10.2f}")
        for row in self.per_attribute:
            rows.append(f"{row['name']:<12}{row['continuity']:>9.2f}{row['consistency']:>9.2f}"
                        f"{row['scope']:>9.2f}{row['entanglement']:>10.2f}")
        return "\n".join(rows)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate_checkpoint(checkpoint_path, world: World, protocol: SweepProtocol,
                        delta: float = DEFAULT_IDENTITY_DELTA,
                        epsilon: float = DEFAULT_ENTANGLE_EPSILON):
    """Load a checkpoint, run the sweep, and aggregate the report."""
    params, cfg, header = load_checkpoint(checkpoint_path)
    if header["world_spec_hash"] != world.spec.hash():
        raise SpecValidationError(
            f"checkpoint world hash {header['world_spec_hash']:#x} does not match "
            f"world {world.spec.hash():#x}")
    train_extra = header.get("extra", {}).get("train", {})
    sched = make_schedule(train_extra.get("schedule_T", 100),
                          train_extra.get("schedule_kind", "cosine"))
    factory = checkpoint_denoiser_factory(params, cfg, world)
    results = run_sweep(world, protocol, factory, sched)
    return report(results, delta, epsilon, world.attribute_names), results


def report(results: SweepResults, delta: float = DEFAULT_IDENTITY_DELTA,
           epsilon: float = DEFAULT_ENTANGLE_EPSILON,
           attribute_names: list[str] | None = None) -> MetricsReport:
    """Aggregate the four metrics overall and per target attribute."""
    names = attribute_names or [f"attr_{i}" for i in range(results.n_attributes)]
    per_attr = []
    for i in range(results.n_attributes):
        sub = SweepResults(protocol=results.protocol, n_attributes=results.n_attributes,
                           lines=[ln for ln in results.lines if ln.target_attr == i])
        per_attr.append({
            "attribute": i,
            "name": names[i],
            "continuity": continuity(sub),
            "scope": scope(sub),
            "consistency": consistency(sub, delta),
            "entanglement": entanglement(sub, epsilon),
            "n_lines": len(sub.lines),
        })
    n_values = len(results.protocol.values)
    pairs_per_line = len(_line_pairs(n_values, results.protocol.continuity_pairs))
    return MetricsReport(
        schema_version=1,
        continuity=continuity(results),
        scope=scope(results),
        consistency=consistency(results, delta),
        entanglement=entanglement(results, epsilon),
        identity_delta=delta,
        entangle_epsilon=epsilon,
        n_lines=len(results.lines),
        n_cells=len(results.lines) * n_values,
        n_pairs=len(results.lines) * pairs_per_line,
        per_attribute=per_attr,
        protocol=results.protocol.to_dict(),
    )
