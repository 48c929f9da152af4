"""The assembled speech LM: frontend -> encoder -> adapter -> LM, with parameter groups.

Training examples are prepared once (mel + frozen encoder output cached), then
batched into padded hybrid sequences with teacher-forcing labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import adapter as ad
from . import encoder as enc
from . import lm
from . import numerics as nx
from .frontend import AudioSignal, FrontendConfig, log_mel
from .grammar import Form, Instruction, Vocabulary, default_vocab, tokenize
from .numerics import ParamGroup, Tensor

GROUPS = ("encoder", "adapter", "lm", "lora")


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontendConfig = FrontendConfig()
    encoder: enc.EncoderConfig = enc.EncoderConfig()
    adapter: ad.AdapterConfig = ad.AdapterConfig()
    lm: lm.LmConfig | None = None
    seed: int = 0

    def resolved_lm(self, vocab: Vocabulary) -> lm.LmConfig:
        return self.lm if self.lm is not None else lm.LmConfig(vocab_size=len(vocab), d_llm=self.adapter.d_llm)


@dataclass
class Example:
    """One tokenized training/eval item; ``target`` ends with EOS."""

    id: str
    left: tuple[int, ...]
    right: tuple[int, ...]
    target: tuple[int, ...]
    mel: np.ndarray | None = None
    enc: np.ndarray | None = None
    form: Form = Form.NATURAL
    meta: dict = field(default_factory=dict)

    @property
    def has_audio(self) -> bool:
        return self.mel is not None


class SpeechLM:
    def __init__(self, cfg: ModelConfig = ModelConfig(), vocab: Vocabulary | None = None):
        self.vocab = vocab or default_vocab()
        self.cfg = cfg
        self.lm_cfg = cfg.resolved_lm(self.vocab)
        if self.lm_cfg.vocab_size != len(self.vocab):
            raise ValueError(f"lm vocab_size {self.lm_cfg.vocab_size} != vocabulary size {len(self.vocab)}")
        if cfg.adapter.d_a != cfg.encoder.d_a or cfg.encoder.n_mels != cfg.frontend.n_mels:
            raise ValueError("encoder/adapter/frontend widths disagree")
        s = cfg.seed
        self.groups = {
            "encoder": ParamGroup("encoder", enc.init_encoder(cfg.encoder, s + 11), trainable=False),
            "adapter": ParamGroup("adapter", ad.init_adapter(cfg.adapter, s + 12), trainable=False),
            "lm": ParamGroup("lm", lm.init_lm(self.lm_cfg, s + 13), trainable=False),
            "lora": ParamGroup("lora", lm.init_lora(self.lm_cfg, s + 14), trainable=False),
        }

    # -- parameter access ---------------------------------------------------
    @property
    def encoder(self):
        return self.groups["encoder"].tensors

    @property
    def adapter(self):
        return self.groups["adapter"].tensors

    @property
    def lm(self):
        return self.groups["lm"].tensors

    @property
    def lora(self):
        return self.groups["lora"].tensors

    def set_trainable(self, names) -> None:
        names = set(names)
        for gname, g in self.groups.items():
            g.trainable = gname in names
            for t in g.tensors.values():
                t.requires_grad = g.trainable
                t.grad = None

    def named_tensors(self) -> dict[str, Tensor]:
        return {f"{g}.{k}": t for g, grp in self.groups.items() for k, t in grp.tensors.items()}

    def load_named(self, tensors: dict[str, np.ndarray]) -> None:
        for g, grp in self.groups.items():
            for k, t in grp.tensors.items():
                key = f"{g}.{k}"
                if key not in tensors:
                    if g == "lora":
                        continue
                    raise KeyError(f"checkpoint is missing tensor {key}")
                if tensors[key].shape != t.shape:
                    raise ValueError(f"{key}: checkpoint shape {tensors[key].shape} != model {t.shape}")
                t.data = np.array(tensors[key], dtype=t.data.dtype)

    # -- audio path ---------------------------------------------------------
    def mel(self, signal: AudioSignal) -> np.ndarray:
        return log_mel(signal, self.cfg.frontend).frames

    def encode_mel(self, mel: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return enc.encode_frames(Tensor(mel), self.encoder, self.cfg.encoder).data

    def speech_tokens(self, examples: Sequence[Example]) -> tuple[Tensor, list[int]]:
        """Adapter output [B, L_max, d_llm] for the audio-bearing examples."""
        lengths = [e.mel.shape[0] for e in examples]
        tmax = max(lengths)
        if self.groups["encoder"].trainable:
            mel = np.zeros((len(examples), tmax, self.cfg.encoder.n_mels), nx.DTYPE)
            for i, e in enumerate(examples):
                mel[i, : lengths[i]] = e.mel
            h = enc.encode_frames(Tensor(mel), self.encoder, self.cfg.encoder, lengths)
            h = h * Tensor(_row_mask(lengths, tmax)[:, :, None])
        else:
            buf = np.zeros((len(examples), tmax, self.cfg.encoder.d_a), nx.DTYPE)
            for i, e in enumerate(examples):
                if e.enc is None:
                    e.enc = self.encode_mel(e.mel)
                buf[i, : lengths[i]] = e.enc
            h = Tensor(buf)
        z = ad.adapt_batch(h, self.adapter, self.cfg.adapter, lengths)
        return z, [ad.compressed_len(n) for n in lengths]

    def speech_for_signal(self, signal: AudioSignal) -> np.ndarray:
        with nx.no_grad():
            ex = Example("x", (), (), (), mel=self.mel(signal))
            z, lens = self.speech_tokens([ex])
        return z.data[0, : lens[0]]

    # -- batching -----------------------------------------------------------
    def batch_logits(self, batch: Sequence[Example], noise_std: float = 0.0,
                     rng: np.random.Generator | None = None):
        """Teacher-forced logits and label arrays for a batch.

        Returns ``(logits [B,S,V], labels [B,S], label_mask [B,S], intent_mask [B,S])``
        where label position ``t`` is the prediction made from input row ``t``.
        ``noise_std > 0`` adds Gaussian noise to the prompt rows (everything
        before BOS); used only when pretraining the base LM.
        """
        audio = [i for i, e in enumerate(batch) if e.has_audio]
        z = None
        slots: list[int | None] = [None] * len(batch)
        zlens: list[int] = []
        if audio:
            z, zlens = self.speech_tokens([batch[i] for i in audio])
            for j, i in enumerate(audio):
                slots[i] = j
        seqs = []
        for i, e in enumerate(batch):
            right = e.right + (self.vocab.bos_id,) + e.target[:-1]
            sp = None if slots[i] is None else np.empty((zlens[slots[i]], 0))
            seqs.append(lm.HybridSequence(e.left, sp, right))
        x, lens = lm.assemble_batch(seqs, self.lm, z, pad_id=self.vocab.pad_id, speech_slot=slots)
        if noise_std > 0:
            rng = rng if rng is not None else np.random.default_rng()
            noise = np.zeros(x.shape, x.dtype)
            for b, e in enumerate(batch):
                n = lens[b] - len(e.target)
                noise[b, :n] = noise_std * rng.standard_normal((n, x.shape[2]))
            x = x + Tensor(noise)
        logits = lm.forward_embeddings(x, self.lm, self.lm_cfg, self.lora)
        B, S = x.shape[0], x.shape[1]
        labels = np.zeros((B, S), np.int64)
        label_mask = np.zeros((B, S), bool)
        intent = np.zeros((B, S), bool)
        task_ids = self.vocab.task_ids
        for b, e in enumerate(batch):
            start = lens[b] - len(e.target)
            labels[b, start:lens[b]] = e.target
            label_mask[b, start:lens[b]] = True
            intent[b, start:lens[b]] = [t in task_ids for t in e.target]
        return logits, labels, label_mask, intent

    # -- inference ----------------------------------------------------------
    def prompt(self, e: Example) -> lm.HybridSequence:
        speech = None
        if e.has_audio:
            with nx.no_grad():
                z, lens = self.speech_tokens([e])
            speech = z.data[0, : lens[0]]
        return lm.HybridSequence(e.left, speech, e.right)

    def generate(self, examples: Sequence[Example], max_new: int = 48, batch_size: int = 32,
                 lora: bool = True) -> list[list[int]]:
        out: list[list[int]] = []
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            seqs = _prompts_batch(self, chunk)
            out += lm.generate_greedy_batch(seqs, self.lm, self.lm_cfg, self.lora if lora else None,
                                            max_new, self.vocab.bos_id, self.vocab.eos_id, self.vocab.pad_id)
        return out


def _row_mask(lengths, tmax) -> np.ndarray:
    return (np.arange(tmax)[None, :] < np.asarray(lengths)[:, None]).astype(nx.DTYPE)


def _prompts_batch(model: SpeechLM, chunk: Sequence[Example]) -> list[lm.HybridSequence]:
    audio = [e for e in chunk if e.has_audio]
    zs = {}
    if audio:
        with nx.no_grad():
            z, lens = model.speech_tokens(audio)
        for j, e in enumerate(audio):
            zs[id(e)] = z.data[j, : lens[j]]
    return [lm.HybridSequence(e.left, zs.get(id(e)), e.right) for e in chunk]


# -- example preparation -------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    """Which side of the speech tokens an instruction goes on, per form."""

    fixed: str = "right"
    natural: str = "left"


def make_example(model: SpeechLM, id: str, instruction: Instruction, target: str,
                 signal: AudioSignal | None, placement: Placement = Placement(),
                 meta: dict | None = None) -> Example:
    vocab = model.vocab
    instr = tuple(tokenize(instruction.text, vocab))
    side = placement.fixed if instruction.form is Form.FIXED else placement.natural
    if signal is None:
        left, right = instr, ()
    else:
        left, right = (instr, ()) if side == "left" else ((), instr)
    tgt = tuple(tokenize(target, vocab)) + (vocab.eos_id,)
    mel = None if signal is None else model.mel(signal)
    ex = Example(id, left, right, tgt, mel, None, instruction.form, dict(meta or {}))
    if mel is not None and not model.groups["encoder"].trainable:
        ex.enc = model.encode_mel(mel)
    return ex
