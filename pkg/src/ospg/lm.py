"""Toy decoder-only LM: hybrid sequence assembly, causal forward, LoRA, greedy decoding.

The input to the LM is ``[left text; speech tokens; right text]``.  Speech
rows are continuous embeddings copied verbatim into the sequence; text rows
come from the (frozen) embedding table.  A response always starts after a
BOS marker appended to the conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import layers
from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    max_len: int = 512
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_targets: tuple[str, ...] = ("wq", "wk", "wv", "wo")
    embed_scale: float = 1.0

    def __post_init__(self):
        if self.d_llm % self.n_heads:
            raise ValueError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ValueError("lora rank must be >= 1")
        bad = [t for t in self.lora_targets if t not in LORA_SITES]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}; choose from {LORA_SITES}")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


@dataclass(frozen=True)
class HybridSequence:
    """``[left; speech; right]``; the segment order is fixed by construction."""

    left: tuple[int, ...] = ()
    speech: np.ndarray | None = None  # [L, d_llm], or None for pure text
    right: tuple[int, ...] = ()

    @property
    def speech_len(self) -> int:
        return 0 if self.speech is None else self.speech.shape[0]

    @property
    def total_len(self) -> int:
        return len(self.left) + self.speech_len + len(self.right)

    def extend(self, ids: Sequence[int]) -> HybridSequence:
        return HybridSequence(self.left, self.speech, tuple(self.right) + tuple(ids))


def init_lm(cfg: LmConfig, seed: int = 2) -> layers.Params:
    rng = np.random.default_rng(seed)
    p: layers.Params = {
        "embed": Tensor((rng.standard_normal((cfg.vocab_size, cfg.d_llm)) * cfg.embed_scale).astype(nx.DTYPE)),
    }
    for i in range(cfg.n_layers):
        layers.init_block(p, f"layers.{i}", cfg.d_llm, cfg.ff_mult, rng)
    layers.init_norm(p, "final_ln", cfg.d_llm)
    layers.init_linear(p, "head", cfg.d_llm, cfg.vocab_size, rng)
    return p


LORA_SITES = ("wq", "wk", "wv", "wo", "ff1", "ff2")


def lora_site(cfg: LmConfig, layer: int, target: str) -> tuple[str, int, int]:
    """(weight name, d_out, d_in) of an adaptable projection."""
    d, f = cfg.d_llm, cfg.d_llm * cfg.ff_mult
    if target in ("wq", "wk", "wv", "wo"):
        return f"layers.{layer}.attn.{target}", d, d
    if target == "ff1":
        return f"layers.{layer}.ff1", f, d
    if target == "ff2":
        return f"layers.{layer}.ff2", d, f
    raise ValueError(f"unknown LoRA target {target!r}; choose from {LORA_SITES}")


def init_lora(cfg: LmConfig, seed: int = 3) -> layers.Params:
    """A is random, B is zero, so the adapted model starts equal to the base."""
    rng = np.random.default_rng(seed)
    r = cfg.lora_rank
    p: layers.Params = {}
    for i in range(cfg.n_layers):
        for target in cfg.lora_targets:
            name, d_out, d_in = lora_site(cfg, i, target)
            p[f"{name}.A"] = layers.uniform_init(rng, (r, d_in), d_in)
            p[f"{name}.B"] = Tensor(np.zeros((d_out, r), nx.DTYPE))
    return p


# -- assembly ---------------------------------------------------------------

def assemble_batch(seqs: Sequence[HybridSequence], params: layers.Params,
                   speech: Tensor | None = None, pad_id: int = 0,
                   speech_slot: Sequence[int | None] | None = None) -> tuple[Tensor, np.ndarray]:
    """Build the padded [B, S, d] input embedding matrix for a batch.

    ``speech`` is an optional padded [B', L_max, d] tensor (e.g. straight from
    the adapter); sequence b takes its speech rows from ``speech[speech_slot[b]]``
    (default slot b), using the first ``seq.speech_len`` rows.  When ``speech``
    is omitted the per-sequence ``speech`` arrays are spliced in instead.
    Returns the embeddings and the true lengths.
    """
    embed = params["embed"]
    vocab, d = embed.shape
    if speech_slot is None:
        speech_slot = list(range(len(seqs)))
    if speech is None and any(s.speech is not None for s in seqs):
        for s in seqs:
            if s.speech is not None and (s.speech.ndim != 2 or s.speech.shape[1] != d):
                raise nx.ShapeError(f"speech tokens {s.speech.shape} do not match d_llm {d}")
        lmax = max(s.speech_len for s in seqs)
        buf = np.zeros((len(seqs), max(lmax, 1), d), dtype=embed.dtype)
        for b, s in enumerate(seqs):
            if s.speech is not None:
                buf[b, : s.speech_len] = s.speech
        speech = Tensor(buf)
        speech_slot = list(range(len(seqs)))
    if speech is not None and speech.shape[-1] != d:
        raise nx.ShapeError(f"speech width {speech.shape[-1]} != d_llm {d}")
    lens = np.array([s.total_len for s in seqs])
    S = int(lens.max())
    index = np.full((len(seqs), S), pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        n_left = len(s.left)
        index[b, :n_left] = s.left
        if s.speech_len:
            lmax = speech.shape[1]
            if s.speech_len > lmax:
                raise nx.ShapeError(f"sequence {b} wants {s.speech_len} speech rows, only {lmax} available")
            index[b, n_left:n_left + s.speech_len] = vocab + speech_slot[b] * lmax + np.arange(s.speech_len)
        index[b, n_left + s.speech_len:s.total_len] = s.right
    if speech is None:
        return nx.gather_rows(embed, index), lens
    src = nx.concat([embed, speech.reshape(-1, d)], axis=0)
    return nx.gather_rows(src, index), lens


def assemble_hybrid(left: Sequence[int], z: Tensor | np.ndarray | None, right: Sequence[int],
                    params: layers.Params) -> Tensor:
    """I_final for one example: [|left| + L + |right|, d_llm]."""
    zt = None
    if z is not None:
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=params["embed"].dtype))
        if zt.ndim != 2 or zt.shape[1] != params["embed"].shape[1]:
            raise nx.ShapeError(f"speech tokens {zt.shape} do not match d_llm {params['embed'].shape[1]}")
    seq = HybridSequence(tuple(left), None if zt is None else zt.data, tuple(right))
    x, _ = assemble_batch([seq], params, None if zt is None else zt.reshape(1, *zt.shape))
    return x.reshape(x.shape[1], x.shape[2])


# -- forward ----------------------------------------------------------------

def forward_embeddings(x: Tensor, params: layers.Params, cfg: LmConfig,
                       lora: layers.Params | None = None) -> Tensor:
    """Causal LM over [B, S, d] (or [S, d]) input embeddings -> logits."""
    S = x.shape[-2]
    if S > cfg.max_len:
        raise ValueError(f"sequence length {S} exceeds max_len {cfg.max_len}")
    h = x + Tensor(layers.sinusoidal(S, cfg.d_llm, x.dtype))
    mask = nx.causal_mask(S)
    for i in range(cfg.n_layers):
        h = layers.block(params, f"layers.{i}", h, cfg.n_heads, mask, lora, cfg.lora_scale)
    return layers.linear(params, "head", layers.norm(params, "final_ln", h))


def forward(seq: HybridSequence, params: layers.Params, cfg: LmConfig,
            lora: layers.Params | None = None) -> Tensor:
    if seq.total_len > cfg.max_len:
        raise ValueError(f"sequence length {seq.total_len} exceeds max_len {cfg.max_len}")
    x = assemble_hybrid(seq.left, seq.speech, seq.right, params)
    return forward_embeddings(x, params, cfg, lora)


def lora_merge(params: layers.Params, lora: layers.Params, cfg: LmConfig) -> layers.Params:
    """Fold ``W + (alpha/r) B A`` into the base weights; returns a new table."""
    merged = dict(params)
    for key in lora:
        if not key.endswith(".A"):
            continue
        name = key[:-2]
        a, b = lora[f"{name}.A"].data, lora[f"{name}.B"].data
        w = params[f"{name}.weight"].data
        if b.shape[1] != a.shape[0] or (b.shape[0], a.shape[1]) != w.shape:
            raise nx.ShapeError(f"LoRA shapes A{a.shape} B{b.shape} do not fit weight {w.shape}")
        if not np.any(b):
            continue
        merged[f"{name}.weight"] = Tensor((w + cfg.lora_scale * (b @ a)).astype(w.dtype))
    return merged


# -- decoding ---------------------------------------------------------------

def generate_greedy_batch(seqs: Sequence[HybridSequence], params: layers.Params, cfg: LmConfig,
                          lora: layers.Params | None = None, max_new: int = 48,
                          bos_id: int | None = 1, eos_id: int = 2, pad_id: int = 0) -> list[list[int]]:
    """Greedy decoding for a batch; a BOS marker is appended to each prompt first."""
    prompts = [s.extend([bos_id]) if bos_id is not None else s for s in seqs]
    room = cfg.max_len - max(p.total_len for p in prompts)
    if room < 1:
        raise ValueError("no room left in max_len for generation")
    max_new = min(max_new, room)
    out: list[list[int]] = [[] for _ in seqs]
    done = [False] * len(seqs)
    with nx.no_grad():
        base, lens = assemble_batch(prompts, params, pad_id=pad_id)
        B, S0, d = base.shape
        x = np.zeros((B, S0 + max_new, d), dtype=base.dtype)
        x[:, :S0] = base.data
        lens = lens.copy()
        embed = params["embed"].data
        for _ in range(max_new):
            S = int(lens.max())
            logits = forward_embeddings(Tensor(x[:, :S]), params, cfg, lora).data
            for b in range(B):
                if done[b]:
                    continue
                tok = int(np.argmax(logits[b, lens[b] - 1]))
                if tok == eos_id:
                    done[b] = True
                    continue
                out[b].append(tok)
                x[b, lens[b]] = embed[tok]
                lens[b] += 1
            if all(done):
                break
    return out


def generate_greedy(seq: HybridSequence, params: layers.Params, cfg: LmConfig,
                    lora: layers.Params | None = None, max_new: int = 48,
                    bos_id: int | None = 1, eos_id: int = 2) -> list[int]:
    return generate_greedy_batch([seq], params, cfg, lora, max_new, bos_id, eos_id)[0]
