"""Modality adapter: conv 4x temporal downsampling -> transformer -> linear to D_llm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class AdapterConfig:
    d_a: int = 64
    conv_channels: int = 8
    n_layers: int = 2  # N
    n_heads: int = 4
    ff_mult: int = 4
    d_llm: int = 64
    positional: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("adapter needs at least one transformer layer")
        if self.d_llm % self.n_heads or self.width % self.n_heads:
            raise ValueError("d_llm and the flattened conv width must be divisible by n_heads")

    @property
    def reduced_features(self) -> int:
        return nx.conv_out_len(nx.conv_out_len(self.d_a, 3, 2, 1), 3, 2, 1)

    @property
    def width(self) -> int:
        return self.conv_channels * self.reduced_features


def compressed_len(t: int) -> int:
    return -(-t // 4)


def init_adapter(cfg: AdapterConfig, seed: int = 1) -> layers.Params:
    rng = np.random.default_rng(seed)
    c = cfg.conv_channels
    p: layers.Params = {
        "conv1.weight": layers.uniform_init(rng, (c, 1, 3, 3), 9),
        "conv1.bias": Tensor(np.zeros(c, nx.DTYPE)),
        "conv2.weight": layers.uniform_init(rng, (c, c, 3, 3), 9 * c),
        "conv2.bias": Tensor(np.zeros(c, nx.DTYPE)),
    }
    for i in range(cfg.n_layers):
        layers.init_block(p, f"layers.{i}", cfg.width, cfg.ff_mult, rng)
    layers.init_linear(p, "proj", cfg.width, cfg.d_llm, rng)
    return p


def downsample_conv(h: Tensor, params: layers.Params, cfg: AdapterConfig) -> Tensor:
    """[B, T, d_a] (or [T, d_a]) -> [B, c, ceil(T/4), d_a'] after right zero-padding T."""
    single = h.ndim == 2
    if single:
        h = h.reshape(1, *h.shape)
    t = h.shape[1]
    t4 = 4 * compressed_len(t)
    if t4 != t:
        h = nx.pad_axis(h, 1, 0, t4 - t)
    x = h.reshape(h.shape[0], 1, t4, h.shape[2])
    x = nx.gelu(nx.conv2d(x, params["conv1.weight"], params["conv1.bias"], stride=(2, 2), padding=(1, 1)))
    x = nx.gelu(nx.conv2d(x, params["conv2.weight"], params["conv2.bias"], stride=(2, 2), padding=(1, 1)))
    return x.reshape(x.shape[1:]) if single else x


def adapt_batch(h: Tensor, params: layers.Params, cfg: AdapterConfig, lengths=None) -> Tensor:
    """Padded [B, T, d_a] acoustic embeddings -> [B, ceil(T/4), d_llm] speech tokens.

    ``lengths`` are the true frame counts; padded positions are hidden from
    attention so each row matches its unbatched result.
    """
    if h.shape[-1] != cfg.d_a:
        raise nx.ShapeError(f"adapter expects width {cfg.d_a}, got {h.shape[-1]}")
    x = downsample_conv(h, params, cfg)  # [B, c, L, f]
    b, c, L, f = x.shape
    x = x.transpose(0, 2, 1, 3).reshape(b, L, c * f)
    if cfg.positional:
        x = x + Tensor(layers.sinusoidal(L, cfg.width, x.dtype))
    mask = None
    if lengths is not None:
        mask = layers.key_padding_mask([compressed_len(n) for n in lengths], L)
    for i in range(cfg.n_layers):
        x = layers.block(params, f"layers.{i}", x, cfg.n_heads, mask)
    return layers.linear(params, "proj", x)


def adapt(h: Tensor, params: layers.Params, cfg: AdapterConfig) -> Tensor:
    """Z_a for one utterance: [T, d_a] -> [ceil(T/4), d_llm]."""
    if h.ndim != 2:
        raise nx.ShapeError(f"adapt expects [T, d_a], got {h.shape}")
    z = adapt_batch(h.reshape(1, *h.shape), params, cfg)
    return z.reshape(z.shape[1], z.shape[2])
