"""Synthetic oracle world: an invertible map between factors and latents.

The world stands in for real images, their encoder, and attribute
classifiers. A latent is built as c = Q @ [scale(v); z; 0] + b_p where Q is
a seeded orthogonal mixing matrix, v are attribute intensities, z is a
nuisance identity vector and b_p a per-prompt-class offset. Because Q is
orthogonal the map is exactly invertible, so attribute and identity
read-outs of generated latents are ground truth rather than estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

__all__ = [
    "WorldSpec",
    "World",
    "Dataset",
    "default_correlation",
    "nearest_positive_definite",
    "build_world",
    "sample_biased_attributes",
    "sample_uniform_attributes",
    "sample_identities",
    "encode_latent",
    "read_attributes",
    "read_identity",
    "generate_dataset",
    "load_dataset",
    "spec_hash",
]

DATASET_MAGIC = b"CSW1"
PROMPT_OFFSET_SCALE = 0.25
WARP_AMPLITUDE = 0.3
DEFAULT_ATTRIBUTE_NAMES = ("age", "smile", "surprise", "sadness", "anger")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def nearest_positive_definite(matrix: np.ndarray, eig_floor: float = 1e-6) -> np.ndarray:
    """Project a symmetric matrix to the nearest correlation-like PD matrix.

    Symmetrizes, clips eigenvalues from below, and rescales to unit
    diagonal. Idempotent on matrices that are already valid.
    """
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, eig_floor)
    fixed = (vecs * vals) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    return 0.5 * (fixed + fixed.T)


def default_correlation(n_attributes: int) -> np.ndarray:
    """Biased co-occurrence structure for the training sampler.

    Attribute pairs (0, 1) and (2, 3) are strongly anti-correlated, which
    manufactures the imbalance that entangles a model trained on this data
    alone. The matrix is projected to the nearest PD correlation matrix.
    """
    corr = np.eye(n_attributes)
    if n_attributes >= 2:
        corr[0, 1] = corr[1, 0] = -0.7
    if n_attributes >= 4:
        corr[2, 3] = corr[3, 2] = -0.5
    return nearest_positive_definite(corr)


@dataclass(frozen=True)
class WorldSpec:
    """Configuration of the synthetic world. Hashable via canonical JSON."""

    n_attributes: int = 5
    latent_dim: int = 64
    n_prompt_classes: int = 8
    identity_dim: int = 8
    text_len: int = 8
    token_dim: int = 64
    obs_noise_sigma: float = 0.01
    world_seed: int = 0
    nonlinear_warp: bool = False
    attr_correlation: np.ndarray | None = None

    def __post_init__(self):
        if self.attr_correlation is None:
            object.__setattr__(self, "attr_correlation", default_correlation(self.n_attributes))
        else:
            object.__setattr__(
                self, "attr_correlation", np.asarray(self.attr_correlation, dtype=np.float64)
            )

    def validate(self) -> None:
        if min(self.n_attributes, self.latent_dim, self.n_prompt_classes, self.identity_dim,
               self.text_len, self.token_dim) < 1:
            raise ValueError("all world dimensions must be >= 1")
        if self.n_attributes + self.identity_dim > self.latent_dim:
            raise ValueError(
                f"n_attributes + identity_dim = {self.n_attributes + self.identity_dim} "
                f"exceeds latent_dim = {self.latent_dim}"
            )
        corr = self.attr_correlation
        if corr.shape != (self.n_attributes, self.n_attributes):
            raise ValueError(f"attr_correlation must be {self.n_attributes}x{self.n_attributes}")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise ValueError("attr_correlation must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-9):
            raise ValueError("attr_correlation must have unit diagonal")
        if np.linalg.eigvalsh(corr).min() <= 0:
            raise ValueError("attr_correlation must be positive-definite")
        if self.obs_noise_sigma < 0:
            raise ValueError("obs_noise_sigma must be >= 0")

    def canonical_json(self) -> str:
        """Stable serialization used for hashing and file headers."""
        payload = {
            "n_attributes": self.n_attributes,
            "latent_dim": self.latent_dim,
            "n_prompt_classes": self.n_prompt_classes,
            "identity_dim": self.identity_dim,
            "text_len": self.text_len,
            "token_dim": self.token_dim,
            "obs_noise_sigma": float(self.obs_noise_sigma),
            "world_seed": int(self.world_seed),
            "nonlinear_warp": bool(self.nonlinear_warp),
            "attr_correlation": [[float(x) for x in row] for row in self.attr_correlation],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def hash(self) -> int:
        return fnv1a64(self.canonical_json().encode("utf-8"))

    @staticmethod
    def from_json(text: str) -> "WorldSpec":
        raw = json.loads(text)
        return WorldSpec(
            n_attributes=raw["n_attributes"],
            latent_dim=raw["latent_dim"],
            n_prompt_classes=raw["n_prompt_classes"],
            identity_dim=raw["identity_dim"],
            text_len=raw["text_len"],
            token_dim=raw.get("token_dim", 64),
            obs_noise_sigma=raw["obs_noise_sigma"],
            world_seed=raw["world_seed"],
            nonlinear_warp=raw.get("nonlinear_warp", False),
            attr_correlation=np.asarray(raw["attr_correlation"], dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.canonical_json() + "\n")

    @staticmethod
    def load(path) -> "WorldSpec":
        return WorldSpec.from_json(Path(path).read_text())


def spec_hash(spec: WorldSpec) -> int:
    return spec.hash()


@dataclass(frozen=True)
class World:
    """Materialized world: mixing matrix, offsets, token table, sampler state."""

    spec: WorldSpec
    mixing: np.ndarray          # (D, D) orthogonal
    prompt_offsets: np.ndarray  # (P, D)
    token_table: np.ndarray     # (P, L, token_dim), unit RMS
    corr_cholesky: np.ndarray   # (N, N) lower triangular

    @property
    def attribute_names(self) -> list[str]:
        n = self.spec.n_attributes
        if n <= len(DEFAULT_ATTRIBUTE_NAMES):
            return list(DEFAULT_ATTRIBUTE_NAMES[:n])
        names = list(DEFAULT_ATTRIBUTE_NAMES)
        names += [f"attr_{i}" for i in range(len(names), n)]
        return names

    @property
    def prompt_class_names(self) -> list[str]:
        return [f"class_{i}" for i in range(self.spec.n_prompt_classes)]


def build_world(spec: WorldSpec) -> World:
    """Deterministically materialize a world from its spec.

    The mixing matrix comes from a QR factorization of a seeded Gaussian
    matrix with the sign convention fixed so the result is unique.
    """
    spec.validate()
    rng = np.random.default_rng(spec.world_seed)
    d = spec.latent_dim
    gauss = rng.standard_normal((d, d))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    prompt_offsets = rng.standard_normal((spec.n_prompt_classes, d)) * PROMPT_OFFSET_SCALE
    token_table = rng.standard_normal((spec.n_prompt_classes, spec.text_len, spec.token_dim))
    token_table /= np.sqrt(np.mean(token_table**2))
    chol = np.linalg.cholesky(spec.attr_correlation)
    for arr in (q, prompt_offsets, token_table, chol):
        arr.flags.writeable = False
    return World(spec=spec, mixing=q, prompt_offsets=prompt_offsets,
                 token_table=token_table, corr_cholesky=chol)


def _scale_attributes(v: np.ndarray, warp: bool) -> np.ndarray:
    """Monotone map [0,1] -> [-1,1], optionally with a fixed smooth warp."""
    u = 2.0 * v - 1.0
    if warp:
        u = u + WARP_AMPLITUDE * np.sin(np.pi * u) / np.pi
    return u


def _unscale_attributes(u: np.ndarray, warp: bool) -> np.ndarray:
    if warp:
        # Invert u + a*sin(pi u)/pi by Newton; derivative >= 1 - a > 0.
        y = np.array(u, dtype=np.float64)
        x = y.copy()
        for _ in range(40):
            f = x + WARP_AMPLITUDE * np.sin(np.pi * x) / np.pi - y
            fp = 1.0 + WARP_AMPLITUDE * np.cos(np.pi * x)
            x = x - f / fp
        u = x
    return (u + 1.0) / 2.0


def sample_biased_attributes(world: World, count: int, rng_seed: int) -> np.ndarray:
    """Draw (count, N) slider vectors from the correlated Gaussian copula.

    Marginals stay uniform on [0,1]; the copula injects the co-occurrence
    bias encoded in the spec's correlation matrix.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(rng_seed)
    g = rng.standard_normal((count, world.spec.n_attributes)) @ world.corr_cholesky.T
    return ndtr(g)


def sample_uniform_attributes(count: int, n_attributes: int, rng_seed: int) -> np.ndarray:
    """I.i.d. uniform slider vectors, (count, N)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(rng_seed)
    return rng.random((count, n_attributes))


def sample_identities(count: int, identity_dim: int, rng_seed: int) -> np.ndarray:
    """I.i.d. uniform identity vectors on [-1, 1]^K, (count, K)."""
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-1.0, 1.0, (count, identity_dim))


def encode_latent(world: World, sliders: np.ndarray, identity: np.ndarray,
                  prompt_class) -> np.ndarray:
    """Noiseless ground-truth latent for (v, z, p). Batched over leading axes."""
    spec = world.spec
    v = np.asarray(sliders, dtype=np.float64)
    z = np.asarray(identity, dtype=np.float64)
    p = np.asarray(prompt_class)
    batch_shape = v.shape[:-1]
    pad = spec.latent_dim - spec.n_attributes - spec.identity_dim
    content = np.concatenate(
        [
            _scale_attributes(v, spec.nonlinear_warp),
            np.broadcast_to(z, batch_shape + (spec.identity_dim,)),
            np.zeros(batch_shape + (pad,)),
        ],
        axis=-1,
    )
    return content @ world.mixing.T + world.prompt_offsets[p]


def _demix(world: World, latent: np.ndarray, prompt_class) -> np.ndarray:
    c = np.asarray(latent, dtype=np.float64)
    p = np.asarray(prompt_class)
    return (c - world.prompt_offsets[p]) @ world.mixing


def read_attributes(world: World, latent: np.ndarray, prompt_class) -> np.ndarray:
    """Oracle attribute scores of a latent, clamped to [0, 1]."""
    y = _demix(world, latent, prompt_class)
    u = y[..., : world.spec.n_attributes]
    return np.clip(_unscale_attributes(u, world.spec.nonlinear_warp), 0.0, 1.0)


def read_identity(world: World, latent: np.ndarray, prompt_class) -> np.ndarray:
    """Oracle identity read-out of a latent, clamped to [-1, 1]."""
    spec = world.spec
    y = _demix(world, latent, prompt_class)
    return np.clip(y[..., spec.n_attributes : spec.n_attributes + spec.identity_dim], -1.0, 1.0)


@dataclass
class Dataset:
    """In-memory view of a dataset file."""

    spec: WorldSpec
    spec_hash: int
    sigma: float
    data_seed: int
    prompt_class: np.ndarray  # (M,) uint32
    sliders: np.ndarray       # (M, N) float32
    identity: np.ndarray      # (M, K) float32
    latent: np.ndarray        # (M, D) float32

    def __len__(self) -> int:
        return len(self.prompt_class)


def _record_dtype(spec: WorldSpec) -> np.dtype:
    return np.dtype(
        [
            ("prompt_class", "<u4"),
            ("sliders", "<f4", (spec.n_attributes,)),
            ("identity", "<f4", (spec.identity_dim,)),
            ("latent", "<f4", (spec.latent_dim,)),
        ]
    )


def generate_dataset(world: World, count: int, path, rng_seed: int,
                     obs_noise_sigma: float | None = None) -> Dataset:
    """Sample `count` records from the biased distribution and write them.

    Sliders come from the correlated copula, identities are uniform, prompt
    classes uniform over [0, P), and the stored latent is the exact encoding
    plus isotropic Gaussian noise of the given sigma.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    spec = world.spec
    sigma = spec.obs_noise_sigma if obs_noise_sigma is None else float(obs_noise_sigma)
    rng = np.random.default_rng(rng_seed)
    g = rng.standard_normal((count, spec.n_attributes)) @ world.corr_cholesky.T
    sliders = ndtr(g)
    identity = rng.uniform(-1.0, 1.0, (count, spec.identity_dim))
    prompt_class = rng.integers(0, spec.n_prompt_classes, count, dtype=np.uint32)
    latent = encode_latent(world, sliders, identity, prompt_class)
    if sigma > 0:
        latent = latent + sigma * rng.standard_normal(latent.shape)
    records = np.empty(count, dtype=_record_dtype(spec))
    records["prompt_class"] = prompt_class
    records["sliders"] = sliders
    records["identity"] = identity
    records["latent"] = latent

    spec_json = spec.canonical_json().encode("utf-8")
    header = b"".join(
        [
            DATASET_MAGIC,
            np.uint32(len(spec_json)).tobytes(),
            spec_json,
            np.uint64(spec.hash()).tobytes(),
            np.float32(sigma).tobytes(),
            np.uint64(rng_seed).tobytes(),
            np.uint64(count).tobytes(),
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())
    return Dataset(
        spec=spec,
        spec_hash=spec.hash(),
        sigma=sigma,
        data_seed=rng_seed,
        prompt_class=records["prompt_class"].copy(),
        sliders=records["sliders"].copy(),
        identity=records["identity"].copy(),
        latent=records["latent"].copy(),
    )


def load_dataset(path, expected_spec: WorldSpec | None = None) -> Dataset:
    """Read a dataset file, verifying magic and spec hash."""
    blob = Path(path).read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic {blob[:4]!r})")
    off = 4
    (json_len,) = np.frombuffer(blob, "<u4", 1, off)
    off += 4
    spec_json = blob[off : off + int(json_len)]
    off += int(json_len)
    (stored_hash,) = np.frombuffer(blob, "<u8", 1, off)
    off += 8
    (sigma,) = np.frombuffer(blob, "<f4", 1, off)
    off += 4
    (data_seed,) = np.frombuffer(blob, "<u8", 1, off)
    off += 8
    (count,) = np.frombuffer(blob, "<u8", 1, off)
    off += 8
    if fnv1a64(spec_json) != int(stored_hash):
        raise ValueError(f"{path}: spec hash mismatch, file corrupt")
    spec = WorldSpec.from_json(spec_json.decode("utf-8"))
    if expected_spec is not None and spec.hash() != expected_spec.hash():
        raise ValueError(
            f"{path}: dataset spec hash {int(stored_hash):#x} does not match "
            f"expected world spec hash {expected_spec.hash():#x}"
        )
    records = np.frombuffer(blob, _record_dtype(spec), int(count), off)
    return Dataset(
        spec=spec,
        spec_hash=int(stored_hash),
        sigma=float(sigma),
        data_seed=int(data_seed),
        prompt_class=records["prompt_class"].copy(),
        sliders=records["sliders"].copy(),
        identity=records["identity"].copy(),
        latent=records["latent"].copy(),
    )
