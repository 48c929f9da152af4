"""Toy acoustic encoder standing in for a frozen pretrained speech encoder.

Linear input projection, sinusoidal positions, then pre-norm bidirectional
transformer blocks.  Sequence length is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import numerics as nx
from .frontend import MelSpectrogram
from .numerics import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    d_a: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    frozen: bool = True
    positional: bool = True

    def __post_init__(self):
        if self.d_a % self.n_heads:
            raise ValueError(f"d_a={self.d_a} not divisible by n_heads={self.n_heads}")


def init_encoder(cfg: EncoderConfig, seed: int = 0) -> layers.Params:
    rng = np.random.default_rng(seed)
    p: layers.Params = {}
    layers.init_linear(p, "input", cfg.n_mels, cfg.d_a, rng)
    for i in range(cfg.n_layers):
        layers.init_block(p, f"layers.{i}", cfg.d_a, cfg.ff_mult, rng)
    layers.init_norm(p, "final_ln", cfg.d_a)
    return p


def encode_frames(frames: Tensor, params: layers.Params, cfg: EncoderConfig, lengths=None) -> Tensor:
    """Encode [T, n_mels] or padded [B, T, n_mels] frames into [.., T, d_a]."""
    if frames.shape[-1] != cfg.n_mels:
        raise nx.ShapeError(f"encoder expects {cfg.n_mels} mel channels, got {frames.shape[-1]}")
    t = frames.shape[-2]
    x = layers.linear(params, "input", frames)
    if cfg.positional:
        x = x + Tensor(layers.sinusoidal(t, cfg.d_a, x.dtype))
    mask = None
    if lengths is not None and frames.ndim == 3:
        mask = layers.key_padding_mask(lengths, t)
    for i in range(cfg.n_layers):
        x = layers.block(params, f"layers.{i}", x, cfg.n_heads, mask)
    return layers.norm(params, "final_ln", x)


def encode(mel: MelSpectrogram, params: layers.Params, cfg: EncoderConfig) -> Tensor:
    """H_a for one utterance: [T, d_a] with T equal to the spectrogram frame count."""
    return encode_frames(Tensor(mel.frames), params, cfg)
