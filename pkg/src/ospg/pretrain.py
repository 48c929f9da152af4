"""Generic text pretraining for the toy base LM.

The backbone being imitated arrives pretrained; a randomly initialized toy LM
has no copying or reading circuitry, and growing that through low-rank
adapters alone takes far longer than the desk budget. So before any speech
stage the base LM is trained briefly on task-agnostic synthetic text, then
frozen for the rest of the curriculum. No pair links a task tag or an
attribute label to its meaning.

Four kinds of prompt -> response pairs are drawn:

* ``copy``: "repeat after me, a c f" -> "a c f"
* ``collapse``: "aacccff" -> "a c f" (runs of 1-4, like a tone spread over
  several speech tokens)
* ``add``: "what is two plus three?" -> "5"
* ``echo``: "repeat after me, " followed by arbitrary vocabulary tokens,
  echoed back; this is the only place every embedding and output row gets
  trained, with no meaning attached to any of them

Prompt embeddings are perturbed with Gaussian noise throughout. A base LM
that reads noisy inputs gives the adapter usable gradients long before its
outputs land near real token embeddings; without the noise, transcription
learns several times slower.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .grammar import Vocabulary, tokenize
from .model import Example, SpeechLM

log = logging.getLogger(__name__)

LETTERS = "abcdefghijklmnop"
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
KINDS = ("copy", "collapse", "add", "echo")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    pool: int = 20_000
    weights: tuple[float, ...] = (0.3, 0.3, 0.15, 0.25)
    # std of Gaussian noise on prompt embeddings (token embeddings have std 1)
    noise_std: float = 1.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.steps < 0 or self.batch_size < 1 or self.pool < 1:
            raise ValueError("pretrain steps must be >= 0, batch_size and pool >= 1")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if len(self.weights) != len(KINDS) or min(self.weights) < 0 or not np.isclose(sum(self.weights), 1.0):
            raise ValueError(f"pretrain weights must be {len(KINDS)} non-negative numbers summing to 1")

    def lr_at(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(1, self.steps - self.warmup)
        return self.lr * (0.1 + 0.45 * (1 + np.cos(np.pi * min(1.0, frac))))


def text_pair(kind: str, rng: np.random.Generator) -> tuple[str, str]:
    if kind == "add":
        a, b = (int(x) for x in rng.integers(0, 5, 2))
        return f"what is {NUMBER_WORDS[a]} plus {NUMBER_WORDS[b]}?", str(a + b)
    syms = [LETTERS[k] for k in rng.permutation(len(LETTERS))[: int(rng.integers(2, 9))]]
    if kind == "copy":
        return "repeat after me, " + " ".join(syms), " ".join(syms)
    if kind == "collapse":
        return "".join(c * int(rng.integers(1, 5)) for c in syms), " ".join(syms)
    raise ValueError(f"unknown pretraining text kind {kind!r}")


def echo_ids(vocab: Vocabulary, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    specials = {vocab.pad_id, vocab.bos_id, vocab.eos_id}
    pool = [i for i in range(len(vocab)) if i not in specials]
    ids = [pool[j] for j in rng.integers(0, len(pool), int(rng.integers(1, 9)))]
    return tokenize("repeat after me, ", vocab) + ids, ids


def text_examples(n: int, vocab: Vocabulary, seed: int = 0,
                  weights: tuple[float, ...] = PretrainConfig.weights) -> list[Example]:
    rng = np.random.default_rng([seed, 0xBA5E])
    kinds = rng.choice(len(KINDS), size=n, p=np.asarray(weights) / sum(weights))
    out = []
    for i, k in enumerate(kinds):
        if KINDS[k] == "echo":
            src_ids, tgt_ids = echo_ids(vocab, rng)
        else:
            src, tgt = text_pair(KINDS[k], rng)
            src_ids, tgt_ids = tokenize(src, vocab), tokenize(tgt, vocab)
        out.append(Example(f"pre-{i}", tuple(src_ids), (), tuple(tgt_ids) + (vocab.eos_id,), meta={"kind": KINDS[k]}))
    return out


def pretrain_base(model: SpeechLM, cfg: PretrainConfig = PretrainConfig(),
                  on_step: Callable[[dict], None] | None = None) -> list[float]:
    """Train every base-LM weight on generic text; returns the loss trace.

    LoRA, adapter and encoder are untouched. Leaves nothing trainable.
    """
    if cfg.steps == 0:
        return []
    pool = text_examples(cfg.pool, model.vocab, cfg.seed, cfg.weights)
    rng = np.random.default_rng([cfg.seed, 0x9E7])
    model.set_trainable({"lm"})
    group = model.groups["lm"]
    opt = nx.Adam(lr=cfg.lr)
    losses = []
    try:
        for step in range(cfg.steps):
            batch = [pool[i] for i in rng.integers(0, len(pool), cfg.batch_size)]
            group.zero_grad()
            logits, labels, mask, _ = model.batch_logits(batch, cfg.noise_std, rng)
            loss = nx.cross_entropy(logits, labels, mask)
            loss.backward()
            opt.step([group], cfg.lr_at(step))
            losses.append(float(loss.data))
            if on_step is not None:
                on_step({"stage": "pretrain", "step": step, "loss_total": losses[-1]})
            if step % 250 == 0:
                log.info("pretrain step %d loss %.4f", step, losses[-1])
    finally:
        model.set_trainable(())
    return losses
