"""Encoder-decoder for cross-series masked reconstruction.

Every token of every series shares one patch projection; series identity and
grid position enter as learned additive embeddings. The encoder sees only
visible tokens. The decoder receives the adapted latents at visible slots and
``mask_token + position + series`` at every hidden slot, and predicts all
``s * N`` slots.
"""

from __future__ import annotations

import numpy as np

from .config import MaskConfig, ModelConfig
from .errors import ConfigurationError, UsageError
from .masking import MaskPlan
from .numerics import autodiff as ad
from .numerics.autodiff import PRECISIONS, Tensor
from .numerics.layers import Params, init_block, init_layer_norm, init_linear, transformer_block
from .volumes import TokenGrid

ENCODER_PREFIXES = ("patch_embed.", "pos_embed", "series_embed", "enc.")

# predicted token values, shape (s, N, p**3)
Reconstruction = Tensor


def init_params(cfg: ModelConfig, rng: np.random.Generator, decoder: bool = True) -> Params:
    dtype = PRECISIONS[cfg.precision]
    t = cfg.patch_edge ** 3

    def table(rows, cols, name):
        data = rng.normal(0.0, cfg.init_std, size=(rows, cols)).astype(dtype)
        return Tensor(data, requires_grad=True, name=name)

    p: Params = {}
    p.update(init_linear(rng, t, cfg.d_enc, "patch_embed", dtype))
    p["pos_embed"] = table(cfg.n_max, cfg.d_enc, "pos_embed")
    p["series_embed"] = table(cfg.s_max, cfg.d_enc, "series_embed")
    for i in range(cfg.enc_depth):
        p.update(init_block(rng, cfg.d_enc, f"enc.blocks.{i}", cfg.mlp_ratio, dtype))
    if cfg.enc_depth:
        p.update(init_layer_norm(cfg.d_enc, "enc.norm", dtype))
    if not decoder:
        return p
    p.update(init_linear(rng, cfg.d_enc, cfg.d_dec, "dec.adapter", dtype))
    p["dec.mask_token"] = Tensor(rng.normal(0.0, cfg.init_std, size=(1, cfg.d_dec)).astype(dtype),
                                 requires_grad=True, name="dec.mask_token")
    p["dec.pos_embed"] = table(cfg.n_max, cfg.d_dec, "dec.pos_embed")
    p["dec.series_embed"] = table(cfg.s_max, cfg.d_dec, "dec.series_embed")
    for i in range(cfg.dec_depth):
        p.update(init_block(rng, cfg.d_dec, f"dec.blocks.{i}", cfg.mlp_ratio, dtype))
    if cfg.dec_depth:
        p.update(init_layer_norm(cfg.d_dec, "dec.norm", dtype))
    p.update(init_linear(rng, cfg.d_dec, t, "dec.head", dtype))
    return p


def encoder_names(params: Params) -> list[str]:
    return [k for k in params if k.startswith(ENCODER_PREFIXES)]


def _check_plan(tokens: TokenGrid, plan: MaskPlan, cfg: ModelConfig) -> None:
    if plan.s != tokens.series_count or plan.n_tokens != tokens.n_tokens:
        raise UsageError(f"plan covers {plan.s} series x {plan.n_tokens} tokens, grid has "
                         f"{tokens.series_count} x {tokens.n_tokens}")
    if tokens.series_count > cfg.s_max:
        raise ConfigurationError(f"{tokens.series_count} series exceed s_max={cfg.s_max}",
                                 field="model.s_max")
    if tokens.n_tokens > cfg.n_max:
        raise ConfigurationError(f"{tokens.n_tokens} tokens exceed n_max={cfg.n_max}",
                                 field="model.n_max")
    if tokens.tokens.shape[2] != cfg.patch_edge ** 3:
        raise UsageError(f"token width {tokens.tokens.shape[2]} != patch_edge**3")


def embed_visible(tokens: TokenGrid, plan: MaskPlan, params: Params,
                  cfg: ModelConfig) -> Tensor:
    """projection(token) + position[i] + series[j] for each visible (j, i)."""
    _check_plan(tokens, plan, cfg)
    sj, ti = plan.visible_pairs()
    dtype = params["patch_embed.w"].dtype
    raw = Tensor(tokens.tokens[sj, ti].astype(dtype, copy=False))
    x = raw @ params["patch_embed.w"] + params["patch_embed.b"]
    return x + ad.take_rows(params["pos_embed"], ti) + ad.take_rows(params["series_embed"], sj)


def _stack(x: Tensor, params: Params, prefix: str, depth: int, heads: int,
           cfg: ModelConfig, rng) -> Tensor:
    for i in range(depth):
        x = transformer_block(x, params, f"{prefix}.blocks.{i}", heads, cfg.ln_eps,
                              cfg.dropout, rng)
    if depth:
        x = ad.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"], cfg.ln_eps)
    return x


def encode(embeddings: Tensor, params: Params, cfg: ModelConfig,
           rng: np.random.Generator | None = None) -> Tensor:
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise UsageError("encoder needs a non-empty (tokens, width) sequence")
    return _stack(embeddings, params, "enc", cfg.enc_depth, cfg.enc_heads, cfg, rng)


def decode(latent: Tensor, plan: MaskPlan, params: Params, cfg: ModelConfig,
           rng: np.random.Generator | None = None) -> Reconstruction:
    s, N = plan.s, plan.n_tokens
    vs, vi = plan.visible_pairs()
    if latent.shape[0] != vs.size:
        raise UsageError(f"latent has {latent.shape[0]} rows, plan has {vs.size} visible slots")
    hidden = np.ones((s, N), dtype=bool)
    hidden[vs, vi] = False
    hs, hi = np.nonzero(hidden)

    parts = []
    if vs.size:
        parts.append(latent @ params["dec.adapter.w"] + params["dec.adapter.b"])
    if hs.size:
        parts.append(params["dec.mask_token"] + ad.take_rows(params["dec.pos_embed"], hi)
                     + ad.take_rows(params["dec.series_embed"], hs))
    seq = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    # rows are [visible..., hidden...]; reorder to canonical slot j * N + i
    slot = np.concatenate([vs * N + vi, hs * N + hi])
    order = np.empty(s * N, dtype=np.intp)
    order[slot] = np.arange(s * N)
    x = ad.take_rows(seq, order)
    x = _stack(x, params, "dec", cfg.dec_depth, cfg.dec_heads, cfg, rng)
    out = x @ params["dec.head.w"] + params["dec.head.b"]
    return out.reshape(s, N, cfg.patch_edge ** 3)


def _normalized_target(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)


def reconstruction_loss(recon: Reconstruction, target: TokenGrid, plan: MaskPlan,
                        config: MaskConfig, norm_target: bool = False) -> Tensor:
    """Mean squared error over the loss-eligible voxels of the plan.

    Eligible slots are all masked tokens, including fully-masked series unless
    ``config.reconstruct_masked_series`` is off. Absent series never count.
    """
    if recon.shape != target.tokens.shape:
        raise UsageError(f"reconstruction {recon.shape} vs target {target.tokens.shape}")
    eligible = plan.eligible(config.reconstruct_masked_series)
    if not eligible.any():
        raise ConfigurationError("mask plan leaves no loss-eligible tokens", field="mask")
    tgt = _normalized_target(target.tokens) if norm_target else target.tokens
    return ad.masked_mse(recon, tgt, eligible[:, :, None])


def forward_loss(tokens: TokenGrid, plan: MaskPlan, params: Params, cfg: ModelConfig,
                 mask_cfg: MaskConfig, rng: np.random.Generator | None = None) -> Tensor:
    """embed -> encode -> decode -> reconstruction loss."""
    latent = encode(embed_visible(tokens, plan, params, cfg), params, cfg, rng)
    recon = decode(latent, plan, params, cfg, rng)
    return reconstruction_loss(recon, tokens, plan, mask_cfg, cfg.norm_target)
