"""Transformer building blocks on top of the autodiff core.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names, which
keeps checkpointing and optimizer bookkeeping trivial.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, NumericError
from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, prefix: str,
                dtype=np.float32) -> Params:
    # xavier-uniform weights, zero bias
    bound = math.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
    return {
        f"{prefix}.w": _param(w, f"{prefix}.w"),
        f"{prefix}.b": _param(np.zeros(d_out, dtype=dtype), f"{prefix}.b"),
    }


def init_layer_norm(d: int, prefix: str, dtype=np.float32) -> Params:
    return {
        f"{prefix}.g": _param(np.ones(d, dtype=dtype), f"{prefix}.g"),
        f"{prefix}.b": _param(np.zeros(d, dtype=dtype), f"{prefix}.b"),
    }


def init_block(rng: np.random.Generator, d: int, prefix: str, mlp_ratio: int = 4,
               dtype=np.float32) -> Params:
    """Parameters for one pre-norm transformer block of width ``d``."""
    p: Params = {}
    p.update(init_layer_norm(d, f"{prefix}.ln1", dtype))
    p.update(init_linear(rng, d, 3 * d, f"{prefix}.attn.qkv", dtype))
    p.update(init_linear(rng, d, d, f"{prefix}.attn.proj", dtype))
    p.update(init_layer_norm(d, f"{prefix}.ln2", dtype))
    p.update(init_linear(rng, d, mlp_ratio * d, f"{prefix}.mlp.fc1", dtype))
    p.update(init_linear(rng, mlp_ratio * d, d, f"{prefix}.mlp.fc2", dtype))
    return p


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def layer_norm(x: Tensor, params: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def attention(x: Tensor, params: Params, prefix: str, n_heads: int) -> Tensor:
    """Multi-head softmax self-attention without a causal mask."""
    n, d = x.shape
    dh = d // n_heads
    qkv = linear(x, params, f"{prefix}.qkv")                       # (n, 3d)
    qkv = qkv.reshape(n, 3, n_heads, dh).transpose(1, 2, 0, 3)     # (3, h, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))     # (h, n, n)
    weights = ad.softmax(scores, axis=-1)
    out = (weights @ v).transpose(1, 0, 2).reshape(n, d)
    return linear(out, params, f"{prefix}.proj")


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values after {where}")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def transformer_block(x: Tensor, params: Params, prefix: str, n_heads: int,
                      eps: float = 1e-5, dropout_rate: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual block: x + attn(ln(x)), then h + mlp(ln(h)).

    Dropout on both residual branches is active only when ``rng`` is given.
    """
    if x.ndim != 2:
        raise ConfigurationError(f"block input must be (tokens, width), got {x.shape}")
    d = x.shape[1]
    if d % n_heads:
        raise ConfigurationError(f"width {d} not divisible by {n_heads} heads")
    width = params[f"{prefix}.ln1.g"].shape[0]
    if width != d:
        raise ConfigurationError(f"{prefix}: params expect width {width}, input has {d}")

    a = attention(layer_norm(x, params, f"{prefix}.ln1", eps), params, f"{prefix}.attn", n_heads)
    h = x + dropout(a, dropout_rate, rng)
    _check_finite(h, f"{prefix}.attn")
    m = linear(layer_norm(h, params, f"{prefix}.ln2", eps), params, f"{prefix}.mlp.fc1")
    out = h + dropout(linear(ad.gelu(m), params, f"{prefix}.mlp.fc2"), dropout_rate, rng)
    _check_finite(out, f"{prefix}.mlp")
    return out
