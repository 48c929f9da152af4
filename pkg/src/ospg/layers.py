"""Shared building blocks: parameter init, sinusoidal positions, transformer blocks.

Parameters live in flat ``dict[str, Tensor]`` tables keyed by dotted names, so
that freezing, checkpointing and LoRA lookup all work on plain strings.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor

Params = dict[str, Tensor]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=nx.DTYPE) -> Tensor:
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_linear(p: Params, name: str, d_in: int, d_out: int, rng, bias: bool = True) -> None:
    p[f"{name}.weight"] = uniform_init(rng, (d_out, d_in), d_in)
    if bias:
        p[f"{name}.bias"] = Tensor(np.zeros(d_out, nx.DTYPE))


def init_norm(p: Params, name: str, d: int) -> None:
    p[f"{name}.gamma"] = Tensor(np.ones(d, nx.DTYPE))
    p[f"{name}.beta"] = Tensor(np.zeros(d, nx.DTYPE))


def init_block(p: Params, prefix: str, d: int, ff_mult: int, rng) -> None:
    init_norm(p, f"{prefix}.ln1", d)
    for proj in ("wq", "wk", "wv", "wo"):
        init_linear(p, f"{prefix}.attn.{proj}", d, d, rng)
    init_norm(p, f"{prefix}.ln2", d)
    init_linear(p, f"{prefix}.ff1", d, d * ff_mult, rng)
    init_linear(p, f"{prefix}.ff2", d * ff_mult, d, rng)


def sinusoidal(n: int, d: int, dtype=nx.DTYPE) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0:2 * (d // 2):2] = np.sin(angle)
    pe[:, 1:2 * (d // 2):2] = np.cos(angle)
    return pe.astype(dtype)


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return nx.linear(x, p[f"{name}.weight"], p.get(f"{name}.bias"))


def norm(p: Params, name: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def lora_linear(p: Params, name: str, x: Tensor, lora: Params | None, scale: float) -> Tensor:
    y = linear(p, name, x)
    if lora is not None and f"{name}.A" in lora:
        a, b = lora[f"{name}.A"], lora[f"{name}.B"]
        y = y + nx.linear(nx.linear(x, a), b) * scale
    return y


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, s, d = x.shape
    x = x.reshape(*lead, s, n_heads, d // n_heads)
    n = x.ndim
    return x.transpose(*range(n - 3), n - 2, n - 3, n - 1)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    x = x.transpose(*range(n - 3), n - 2, n - 3, n - 1)
    *lead, s, h, dh = x.shape
    return x.reshape(*lead, s, h * dh)


def self_attention(p: Params, prefix: str, x: Tensor, n_heads: int, mask=None,
                   lora: Params | None = None, lora_scale: float = 1.0) -> Tensor:
    q = lora_linear(p, f"{prefix}.wq", x, lora, lora_scale)
    k = lora_linear(p, f"{prefix}.wk", x, lora, lora_scale)
    v = lora_linear(p, f"{prefix}.wv", x, lora, lora_scale)
    out = nx.attention(_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads), mask)
    return lora_linear(p, f"{prefix}.wo", _merge_heads(out), lora, lora_scale)


def block(p: Params, prefix: str, x: Tensor, n_heads: int, mask=None,
          lora: Params | None = None, lora_scale: float = 1.0) -> Tensor:
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``h + ffn(ln(h))``."""
    h = x + self_attention(p, f"{prefix}.attn", norm(p, f"{prefix}.ln1", x), n_heads, mask, lora, lora_scale)
    f = nx.gelu(lora_linear(p, f"{prefix}.ff1", norm(p, f"{prefix}.ln2", h), lora, lora_scale))
    f = lora_linear(p, f"{prefix}.ff2", f, lora, lora_scale)
    return h + f


def key_padding_mask(lengths, s: int) -> np.ndarray:
    """Additive [B, 1, 1, S] mask hiding key positions beyond each length."""
    lengths = np.asarray(lengths)
    m = np.where(np.arange(s)[None, :] < lengths[:, None], 0.0, nx.NEG_INF)
    return m[:, None, None, :].astype(nx.DTYPE)


def cast_params(p: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype)) for k, v in p.items()}
