"""Transformer denoiser over [condition, slider, text] tokens, plus the
bucket classifier used by the disentanglement objective.

The network is a small adaLN-zero transformer: the noisy condition is
projected to a single token, slider values become N tokens (sinusoidal half
plus learnable class half), text tokens are projected from the world's
token table, and the timestep embedding conditions both the condition token
and the per-block scale/shift/gate modulation. The output head reads the
condition token back to latent space and is zero-initialized, so the
initial prediction is an input-independent bias.

Forward passes can return a cache consumed by the matching backward pass;
gradients are checked against central finite differences in the tests.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels as K
from .embedding import positional_encode
from .errors import NumericError

CHECKPOINT_MAGIC = b"CSCK"


@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 2
    dim: int = 64
    heads: int = 4
    n_sliders: int = 5
    text_len: int = 8
    text_token_dim: int = 64
    latent_dim: int = 64
    n_buckets: int = 20
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % 4 != 0:
            raise ValueError(f"dim must be divisible by 4, got {self.dim}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.blocks, self.n_sliders, self.text_len, self.latent_dim, self.n_buckets) < 1:
            raise ValueError("all model dimensions must be >= 1")

    @property
    def seq_len(self) -> int:
        return 1 + self.n_sliders + self.text_len

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "DenoiserConfig":
        return DenoiserConfig(**raw)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


def init_params(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded parameter dictionary. Modulation and output head start at zero."""
    rng = np.random.default_rng(seed)
    d, D = cfg.dim, cfg.latent_dim
    h = cfg.mlp_ratio * d
    p: dict[str, np.ndarray] = {}
    p["in_proj.w"] = _xavier(rng, D, d, dtype)
    p["in_proj.b"] = np.zeros(d, dtype)
    p["time_mlp.w1"] = _xavier(rng, d, d, dtype)
    p["time_mlp.b1"] = np.zeros(d, dtype)
    p["time_mlp.w2"] = _xavier(rng, d, d, dtype)
    p["time_mlp.b2"] = np.zeros(d, dtype)
    p["text_proj.w"] = _xavier(rng, cfg.text_token_dim, d, dtype)
    p["text_proj.b"] = np.zeros(d, dtype)
    p["pos_embed"] = (0.02 * rng.standard_normal((cfg.seq_len, d))).astype(dtype)
    p["slider_class"] = (0.02 * rng.standard_normal((cfg.n_sliders, d // 2))).astype(dtype)
    for k in range(cfg.blocks):
        pre = f"blocks.{k}."
        p[pre + "attn.wqkv"] = _xavier(rng, d, 3 * d, dtype)
        p[pre + "attn.bqkv"] = np.zeros(3 * d, dtype)
        p[pre + "attn.wo"] = _xavier(rng, d, d, dtype)
        p[pre + "attn.bo"] = np.zeros(d, dtype)
        p[pre + "mlp.w1"] = _xavier(rng, d, h, dtype)
        p[pre + "mlp.b1"] = np.zeros(h, dtype)
        p[pre + "mlp.w2"] = _xavier(rng, h, d, dtype)
        p[pre + "mlp.b2"] = np.zeros(d, dtype)
        p[pre + "mod.w"] = np.zeros((d, 6 * d), dtype)
        # Gates start open (shift/scale stay zero): with this few blocks the
        # usual gate-closed start just delays conditioning uptake.
        mod_b = np.zeros(6 * d, dtype)
        mod_b[2 * d : 3 * d] = 1.0
        mod_b[5 * d : 6 * d] = 1.0
        p[pre + "mod.b"] = mod_b
    p["final.mod.w"] = np.zeros((d, 2 * d), dtype)
    p["final.mod.b"] = np.zeros(2 * d, dtype)
    p["head.w"] = np.zeros((d, D), dtype)
    p["head.b"] = np.zeros(D, dtype)
    p["clf.w1"] = _xavier(rng, 2 * D, h, dtype)
    p["clf.b1"] = np.zeros(h, dtype)
    p["clf.w2"] = _xavier(rng, h, h, dtype)
    p["clf.b2"] = np.zeros(h, dtype)
    p["clf.w3"] = _xavier(rng, h, cfg.n_sliders * cfg.n_buckets, dtype)
    p["clf.b3"] = np.zeros(cfg.n_sliders * cfg.n_buckets, dtype)
    return p


def param_count(cfg: DenoiserConfig) -> int:
    """Closed-form total parameter count for a config."""
    d, D, S = cfg.dim, cfg.latent_dim, cfg.seq_len
    h = cfg.mlp_ratio * d
    n = D * d + d                      # in_proj
    n += 2 * (d * d + d)               # time_mlp
    n += cfg.text_token_dim * d + d    # text_proj
    n += S * d                         # pos_embed
    n += cfg.n_sliders * (d // 2)      # slider class half
    per_block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + (d * 6 * d + 6 * d)
    n += cfg.blocks * per_block
    n += d * 2 * d + 2 * d             # final modulation
    n += d * D + D                     # head
    n += 2 * D * h + h + h * h + h + h * cfg.n_sliders * cfg.n_buckets + cfg.n_sliders * cfg.n_buckets
    return n


DIT_PARAM_PREFIXES = ("in_proj", "time_mlp", "text_proj", "pos_embed", "slider_class",
                      "blocks", "final", "head")


def is_classifier_param(name: str) -> bool:
    return name.startswith("clf.")


def timestep_embed(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sinusoidal timestep embedding, (batch, dim)."""
    half = dim // 2
    freqs = np.exp(-np.arange(half, dtype=np.float64) / half * np.log(10000.0))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1).astype(dtype)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def dit_forward(params: dict, cfg: DenoiserConfig, c_t: np.ndarray, sliders: np.ndarray,
                text_tokens: np.ndarray, t: np.ndarray, want_cache: bool = False):
    """Predict the clean condition from (noisy condition, sliders, text, t).

    c_t: (B, D), sliders: (B, N) in [0,1], text_tokens: (B, L, text_token_dim),
    t: (B,) integer timesteps. Returns (B, D), plus a cache when requested.
    """
    dtype = params["head.w"].dtype
    B = c_t.shape[0]
    d, S, N = cfg.dim, cfg.seq_len, cfg.n_sliders
    c_t = np.ascontiguousarray(c_t, dtype=dtype)
    if c_t.shape != (B, cfg.latent_dim):
        raise ValueError(f"c_t shape {c_t.shape} != (B, {cfg.latent_dim})")
    if np.shape(sliders) != (B, N):
        raise ValueError(f"sliders shape {np.shape(sliders)} != ({B}, {N})")
    if np.shape(text_tokens) != (B, cfg.text_len, cfg.text_token_dim):
        raise ValueError(
            f"text tokens shape {np.shape(text_tokens)} != ({B}, {cfg.text_len}, {cfg.text_token_dim})"
        )

    pos_half = positional_encode(sliders, d, dtype)                   # (B, N, d/2)
    class_half = np.broadcast_to(params["slider_class"], (B, N, d // 2))
    text_flat = np.ascontiguousarray(text_tokens, dtype=dtype).reshape(B * cfg.text_len, -1)
    text_proj = (text_flat @ params["text_proj.w"] + params["text_proj.b"]).reshape(B, cfg.text_len, d)

    temb = timestep_embed(t, d, dtype)
    a1 = temb @ params["time_mlp.w1"] + params["time_mlp.b1"]
    s1 = K.silu_fwd(a1)
    tcond = s1 @ params["time_mlp.w2"] + params["time_mlp.b2"]        # (B, d)

    cond_tok = c_t @ params["in_proj.w"] + params["in_proj.b"] + tcond

    x = np.empty((B, S, d), dtype=dtype)
    x[:, 0] = cond_tok
    x[:, 1 : 1 + N, : d // 2] = pos_half
    x[:, 1 : 1 + N, d // 2 :] = class_half
    x[:, 1 + N :] = text_proj
    x += params["pos_embed"]

    cache = {
        "c_t": c_t, "temb": temb, "a1": a1, "s1": s1, "tcond": tcond,
        "text_flat": text_flat, "blocks": [],
    } if want_cache else None

    scale = float(d // cfg.heads) ** -0.5
    for k in range(cfg.blocks):
        pre = f"blocks.{k}."
        mod = tcond @ params[pre + "mod.w"] + params[pre + "mod.b"]
        sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6, axis=-1)

        ln1, r1 = K.layernorm_fwd(x.reshape(B * S, d))
        ln1 = ln1.reshape(B, S, d)
        a = ln1 * (1.0 + sc1[:, None, :]) + sh1[:, None, :]
        qkv = (a.reshape(B * S, d) @ params[pre + "attn.wqkv"] + params[pre + "attn.bqkv"])
        qkv = qkv.reshape(B, S, 3, cfg.heads, d // cfg.heads)
        q = np.ascontiguousarray(qkv[:, :, 0].transpose(0, 2, 1, 3))
        kk = np.ascontiguousarray(qkv[:, :, 1].transpose(0, 2, 1, 3))
        v = np.ascontiguousarray(qkv[:, :, 2].transpose(0, 2, 1, 3))
        probs, ctx_heads = K.attention_fwd(q, kk, v, scale)
        ctx = _merge_heads(ctx_heads)
        attn_out = (ctx.reshape(B * S, d) @ params[pre + "attn.wo"] + params[pre + "attn.bo"]).reshape(B, S, d)
        x_mid = x + g1[:, None, :] * attn_out

        ln2, r2 = K.layernorm_fwd(x_mid.reshape(B * S, d))
        ln2 = ln2.reshape(B, S, d)
        mlp_in = ln2 * (1.0 + sc2[:, None, :]) + sh2[:, None, :]
        u1 = (mlp_in.reshape(B * S, d) @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        gu, gth = K.gelu_fwd(u1)
        mlp_out = (gu @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]).reshape(B, S, d)
        x_out = x_mid + g2[:, None, :] * mlp_out

        if want_cache:
            cache["blocks"].append({
                "ln1": ln1, "r1": r1, "sc1": sc1, "g1": g1, "a": a,
                "q": q, "k": kk, "v": v, "probs": probs, "ctx": ctx, "attn_out": attn_out,
                "ln2": ln2, "r2": r2, "sc2": sc2, "g2": g2, "mlp_in": mlp_in,
                "u1": u1, "gu": gu, "gth": gth, "mlp_out": mlp_out,
            })
        x = x_out

    ct = np.ascontiguousarray(x[:, 0])
    lnf, rf = K.layernorm_fwd(ct)
    fmod = tcond @ params["final.mod.w"] + params["final.mod.b"]
    fsh, fsc = np.split(fmod, 2, axis=-1)
    fl = lnf * (1.0 + fsc) + fsh
    out = fl @ params["head.w"] + params["head.b"]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite denoiser output")

    if want_cache:
        cache.update({"lnf": lnf, "rf": rf, "fsc": fsc, "fl": fl})
        return out, cache
    return out


def dit_backward(params: dict, cfg: DenoiserConfig, cache: dict,
                 dout: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with upstream dout = dL/d(output)."""
    dtype = params["head.w"].dtype
    B = dout.shape[0]
    d, S, N = cfg.dim, cfg.seq_len, cfg.n_sliders
    g: dict[str, np.ndarray] = {}
    dout = np.ascontiguousarray(dout, dtype=dtype)

    fl, lnf, rf, fsc = cache["fl"], cache["lnf"], cache["rf"], cache["fsc"]
    g["head.w"] = fl.T @ dout
    g["head.b"] = dout.sum(0)
    dfl = dout @ params["head.w"].T
    dfsh = dfl
    dfsc = dfl * lnf
    dlnf = dfl * (1.0 + fsc)
    dfmod = np.concatenate([dfsh, dfsc], axis=-1)
    g["final.mod.w"] = cache["tcond"].T @ dfmod
    g["final.mod.b"] = dfmod.sum(0)
    dtcond = dfmod @ params["final.mod.w"].T
    dct = K.layernorm_bwd(dlnf, lnf, rf)

    dx = np.zeros((B, S, d), dtype=dtype)
    dx[:, 0] = dct

    scale = float(d // cfg.heads) ** -0.5
    for k in range(cfg.blocks - 1, -1, -1):
        pre = f"blocks.{k}."
        cb = cache["blocks"][k]

        # x_out = x_mid + g2 * mlp_out
        dg2 = np.einsum("bsd,bsd->bd", dx, cb["mlp_out"])
        dmlp_out = (dx * cb["g2"][:, None, :]).reshape(B * S, d)
        g[pre + "mlp.w2"] = cb["gu"].T @ dmlp_out
        g[pre + "mlp.b2"] = dmlp_out.sum(0)
        dgu = dmlp_out @ params[pre + "mlp.w2"].T
        du1 = K.gelu_bwd(cb["u1"], cb["gth"], dgu)
        mlp_in_flat = cb["mlp_in"].reshape(B * S, d)
        g[pre + "mlp.w1"] = mlp_in_flat.T @ du1
        g[pre + "mlp.b1"] = du1.sum(0)
        dmlp_in = (du1 @ params[pre + "mlp.w1"].T).reshape(B, S, d)
        dln2 = dmlp_in * (1.0 + cb["sc2"][:, None, :])
        dsc2 = np.einsum("bsd,bsd->bd", dmlp_in, cb["ln2"])
        dsh2 = dmlp_in.sum(1)
        dx_mid = dx + K.layernorm_bwd(
            dln2.reshape(B * S, d), cb["ln2"].reshape(B * S, d), cb["r2"]
        ).reshape(B, S, d)

        # x_mid = x_in + g1 * attn_out
        dg1 = np.einsum("bsd,bsd->bd", dx_mid, cb["attn_out"])
        dattn = (dx_mid * cb["g1"][:, None, :]).reshape(B * S, d)
        g[pre + "attn.wo"] = cb["ctx"].reshape(B * S, d).T @ dattn
        g[pre + "attn.bo"] = dattn.sum(0)
        dctx = (dattn @ params[pre + "attn.wo"].T).reshape(B, S, cfg.heads, d // cfg.heads)
        dctx = np.ascontiguousarray(dctx.transpose(0, 2, 1, 3))  # (B, h, S, dh)
        dq, dk, dv = K.attention_bwd(cb["q"], cb["k"], cb["v"], cb["probs"], dctx, scale)
        dqkv = np.empty((B, S, 3, cfg.heads, d // cfg.heads), dtype=dtype)
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        dqkv_flat = dqkv.reshape(B * S, 3 * d)
        g[pre + "attn.wqkv"] = cb["a"].reshape(B * S, d).T @ dqkv_flat
        g[pre + "attn.bqkv"] = dqkv_flat.sum(0)
        da = (dqkv_flat @ params[pre + "attn.wqkv"].T).reshape(B, S, d)
        dln1 = da * (1.0 + cb["sc1"][:, None, :])
        dsc1 = np.einsum("bsd,bsd->bd", da, cb["ln1"])
        dsh1 = da.sum(1)
        dx = dx_mid + K.layernorm_bwd(
            dln1.reshape(B * S, d), cb["ln1"].reshape(B * S, d), cb["r1"]
        ).reshape(B, S, d)

        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=-1)
        g[pre + "mod.w"] = cache["tcond"].T @ dmod
        g[pre + "mod.b"] = dmod.sum(0)
        dtcond = dtcond + dmod @ params[pre + "mod.w"].T

    g["pos_embed"] = dx.sum(0)
    dcond_tok = dx[:, 0]
    g["slider_class"] = dx[:, 1 : 1 + N, d // 2 :].sum(0)
    dtext = dx[:, 1 + N :].reshape(B * cfg.text_len, d)
    g["text_proj.w"] = cache["text_flat"].T @ dtext
    g["text_proj.b"] = dtext.sum(0)
    g["in_proj.w"] = cache["c_t"].T @ dcond_tok
    g["in_proj.b"] = dcond_tok.sum(0)
    dtcond = dtcond + dcond_tok

    g["time_mlp.w2"] = cache["s1"].T @ dtcond
    g["time_mlp.b2"] = dtcond.sum(0)
    ds1 = dtcond @ params["time_mlp.w2"].T
    da1 = K.silu_bwd(cache["a1"], ds1)
    g["time_mlp.w1"] = cache["temb"].T @ da1
    g["time_mlp.b1"] = da1.sum(0)
    return g


def classifier_forward(params: dict, cfg: DenoiserConfig, out_a: np.ndarray,
                       out_b: np.ndarray, want_cache: bool = False):
    """Bucket logits (B, N, n_buckets) from a pair of predicted conditions.

    The concatenation order (original, random) is fixed; the decoded
    difference is signed.
    """
    if out_a.shape != out_b.shape or out_a.shape[-1] != cfg.latent_dim:
        raise ValueError(f"classifier inputs must be (B, {cfg.latent_dim}), got "
                         f"{out_a.shape} and {out_b.shape}")
    x0 = np.concatenate([out_a, out_b], axis=-1)
    u1 = x0 @ params["clf.w1"] + params["clf.b1"]
    h1, th1 = K.gelu_fwd(u1)
    u2 = h1 @ params["clf.w2"] + params["clf.b2"]
    h2, th2 = K.gelu_fwd(u2)
    logits = (h2 @ params["clf.w3"] + params["clf.b3"])
    logits = logits.reshape(out_a.shape[0], cfg.n_sliders, cfg.n_buckets)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite classifier logits")
    if want_cache:
        return logits, {"x0": x0, "u1": u1, "h1": h1, "th1": th1, "u2": u2,
                        "h2": h2, "th2": th2}
    return logits


def classifier_backward(params: dict, cfg: DenoiserConfig, cache: dict,
                        dlogits: np.ndarray):
    """Returns (clf grads, d_out_a, d_out_b); the pair grads feed the denoiser."""
    B = dlogits.shape[0]
    D = cfg.latent_dim
    g: dict[str, np.ndarray] = {}
    dflat = dlogits.reshape(B, cfg.n_sliders * cfg.n_buckets)
    g["clf.w3"] = cache["h2"].T @ dflat
    g["clf.b3"] = dflat.sum(0)
    dh2 = dflat @ params["clf.w3"].T
    du2 = K.gelu_bwd(cache["u2"], cache["th2"], dh2)
    g["clf.w2"] = cache["h1"].T @ du2
    g["clf.b2"] = du2.sum(0)
    dh1 = du2 @ params["clf.w2"].T
    du1 = K.gelu_bwd(cache["u1"], cache["th1"], dh1)
    g["clf.w1"] = cache["x0"].T @ du1
    g["clf.b1"] = du1.sum(0)
    dx0 = du1 @ params["clf.w1"].T
    return g, dx0[:, :D], dx0[:, D:]


def make_denoiser(params: dict, cfg: DenoiserConfig, sliders: np.ndarray,
                  text_tokens: np.ndarray):
    """Close over fixed conditioning; returns fn(c_t, t) -> c0 prediction."""
    sliders = np.asarray(sliders)
    text_tokens = np.asarray(text_tokens)

    def denoiser(c_t: np.ndarray, t: np.ndarray) -> np.ndarray:
        return dit_forward(params, cfg, c_t, sliders, text_tokens, t)

    return denoiser


# -- checkpoint serialization ------------------------------------------------

def save_checkpoint(path, params: dict, cfg: DenoiserConfig, world_spec_hash: int,
                    step: int, extra: dict | None = None) -> None:
    """Write magic, JSON header, then named little-endian f32 tensors."""
    header = {
        "model": cfg.to_dict(),
        "world_spec_hash": int(world_spec_hash),
        "step": int(step),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(np.uint32(len(hbytes)).tobytes())
    buf.write(hbytes)
    buf.write(np.uint32(len(params)).tobytes())
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(np.uint16(len(nb)).tobytes())
        buf.write(nb)
        buf.write(np.uint8(arr.ndim).tobytes())
        for dim in arr.shape:
            buf.write(np.uint32(dim).tobytes())
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, DenoiserConfig, header dict)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    off = 4
    (hlen,) = np.frombuffer(blob, "<u4", 1, off)
    off += 4
    header = json.loads(blob[off : off + int(hlen)].decode("utf-8"))
    off += int(hlen)
    (count,) = np.frombuffer(blob, "<u4", 1, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(int(count)):
        (nlen,) = np.frombuffer(blob, "<u2", 1, off)
        off += 2
        name = blob[off : off + int(nlen)].decode("utf-8")
        off += int(nlen)
        ndim = blob[off]
        off += 1
        shape = tuple(int(x) for x in np.frombuffer(blob, "<u4", ndim, off))
        off += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, "<f4", size, off).reshape(shape).copy()
        off += 4 * size
    cfg = DenoiserConfig.from_dict(header["model"])
    return params, cfg, header
