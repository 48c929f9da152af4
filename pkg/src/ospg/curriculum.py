"""Three-stage training: tag-based speech alignment, text intent parsing, joint integration.

Stage I   trains {adapter, lora} on fixed-tag prompts (plus text QA to keep the LM talking).
Stage II  trains {lora} on natural instruction -> task identifier text, no audio.
Stage III trains {adapter, lora} on natural instructions with audio; the loss
          splits into an intent term (task-tag positions) and a speech term (the rest).
          By default a fifth of each batch replays stage I fixed-tag samples so
          the fixed prompts are not forgotten.
The encoder and the base LM are never trained by the curriculum.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .grammar import Form
from .model import Example, SpeechLM

log = logging.getLogger(__name__)


class Stage(enum.IntEnum):
    I = 1
    II = 2
    III = 3

    @classmethod
    def parse(cls, s) -> Stage:
        if isinstance(s, Stage):
            return s
        if isinstance(s, int):
            return cls(s)
        key = str(s).strip().upper()
        if key.isdigit():
            return cls(int(key))
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown stage {s!r}; expected I, II or III") from None


MIXES = ("single_task_speech", "multi_task_speech", "text_qa", "intent_text", "joint_multimodal")
STAGE_MIXES = {
    Stage.I: frozenset({"single_task_speech", "multi_task_speech", "text_qa"}),
    Stage.II: frozenset({"intent_text"}),
    Stage.III: frozenset({"joint_multimodal", "single_task_speech"}),
}
REPLAY = 0.2


def trainable_params(stage: Stage, unfreeze_encoder: bool = False) -> frozenset[str]:
    stage = Stage.parse(stage)
    if stage is Stage.II:
        return frozenset({"lora"})
    groups = {"adapter", "lora"}
    if stage is Stage.III and unfreeze_encoder:
        groups.add("encoder")
    return frozenset(groups)


@dataclass
class StageConfig:
    stage: Stage
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 50
    data_mix: dict[str, float] = field(default_factory=dict)
    unfreeze_encoder: bool = False
    # per-group step-size multipliers, e.g. {"adapter": 3.0}
    lr_scale: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.stage = Stage.parse(self.stage)
        bad = {k: v for k, v in self.lr_scale.items() if k not in ("encoder", "adapter", "lora") or v <= 0}
        if bad:
            raise ValueError(f"lr_scale entries must name a trainable group with a positive factor, got {bad}")
        if not self.data_mix:
            self.data_mix = default_mix(self.stage)
        unknown = set(self.data_mix) - set(MIXES)
        if unknown:
            raise ValueError(f"unknown data mix entries {sorted(unknown)}")
        misplaced = set(self.data_mix) - STAGE_MIXES[self.stage]
        if misplaced:
            raise ValueError(f"stage {self.stage.name} cannot draw from {sorted(misplaced)}")
        if abs(sum(self.data_mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"stage {self.stage.name} data mix sums to {sum(self.data_mix.values())}, not 1")

    @property
    def trainable_groups(self) -> frozenset[str]:
        return trainable_params(self.stage, self.unfreeze_encoder)

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to 10% of the peak."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def default_mix(stage: Stage) -> dict[str, float]:
    if stage is Stage.I:
        return {"single_task_speech": 0.72, "multi_task_speech": 0.08, "text_qa": 0.2}
    if stage is Stage.II:
        return {"intent_text": 1.0}
    return {"joint_multimodal": 1.0 - REPLAY, "single_task_speech": REPLAY}


@dataclass
class LossBreakdown:
    intent: float
    speech: float
    total: float


# -- losses -------------------------------------------------------------------

def _check_stage(batch: Sequence[Example], stage: Stage) -> None:
    for e in batch:
        if stage is Stage.I and e.has_audio and e.form is not Form.FIXED:
            raise ValueError(f"{e.id}: stage I speech samples need a fixed instruction")
        if stage is Stage.II and e.has_audio:
            raise ValueError(f"{e.id}: stage II batches must not carry audio")
        if stage is Stage.III:
            replay = e.form is Form.FIXED and e.meta.get("stage") == "I"
            if not e.has_audio or not (e.form is Form.NATURAL or replay):
                raise ValueError(f"{e.id}: stage III samples need audio and a natural instruction "
                                 "(fixed ones only as stage I replay)")


def stage1_loss(model, batch: Sequence[Example]) -> nx.Tensor:
    """Token-mean CE of the target given [speech; fixed tags] (text QA: given the question)."""
    _check_stage(batch, Stage.I)
    logits, labels, mask, _ = model.batch_logits(batch)
    return nx.cross_entropy(logits, labels, mask)


def stage2_loss(model, batch: Sequence[Example]) -> nx.Tensor:
    _check_stage(batch, Stage.II)
    logits, labels, mask, _ = model.batch_logits(batch)
    return nx.cross_entropy(logits, labels, mask)


def stage3_terms(model, batch: Sequence[Example]) -> tuple[nx.Tensor, nx.Tensor]:
    """(intent, speech) loss tensors; each is a mean over its own mask."""
    _check_stage(batch, Stage.III)
    logits, labels, mask, intent = model.batch_logits(batch)
    for b, e in enumerate(batch):
        if not intent[b].any():
            raise ValueError(f"{e.id}: target has no task tag, intent loss undefined")
    speech = mask & ~intent
    return nx.cross_entropy(logits, labels, intent), nx.cross_entropy(logits, labels, speech)


def stage3_loss(model, batch: Sequence[Example]) -> LossBreakdown:
    li, ls = stage3_terms(model, batch)
    i, s = float(li.data), float(ls.data)
    return LossBreakdown(i, s, i + s)


# -- training loop ------------------------------------------------------------

class BatchSampler:
    """Per-mix shuffled pools; each batch takes a fixed, largest-remainder share of each mix."""

    def __init__(self, pools: dict[str, list[Example]], mix: dict[str, float], batch_size: int, seed: int):
        self.pools = {k: pools.get(k, []) for k, v in mix.items() if v > 0}
        for k, pool in self.pools.items():
            if not pool:
                raise ValueError(f"data mix asks for {k!r} but the corpus has none")
        self.rng = np.random.default_rng(seed)
        self.counts = _allocate(mix, batch_size)
        self._order = {k: [] for k in self.pools}

    def _take(self, key: str, n: int) -> list[Example]:
        out = []
        while len(out) < n:
            if not self._order[key]:
                self._order[key] = list(self.rng.permutation(len(self.pools[key])))
            out.append(self.pools[key][self._order[key].pop()])
        return out

    def next(self) -> list[Example]:
        batch = []
        for k, n in self.counts.items():
            batch += self._take(k, n)
        return batch


def _allocate(mix: dict[str, float], n: int) -> dict[str, int]:
    keys = [k for k, v in mix.items() if v > 0]
    raw = {k: mix[k] * n for k in keys}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = n - sum(counts.values())
    for k in sorted(keys, key=lambda k: raw[k] - counts[k], reverse=True)[:rest]:
        counts[k] += 1
    return counts


def train_step(model: SpeechLM, stage: Stage, batch: Sequence[Example], opt: nx.Adam, lr: float,
               lr_scale: dict[str, float] | None = None) -> dict:
    groups = [model.groups[g] for g in model.groups]
    for g in groups:
        g.zero_grad()
    if stage is Stage.III:
        li, ls = stage3_terms(model, batch)
        loss = li + ls
        i, sp = float(li.data), float(ls.data)
        rec = {"loss_total": i + sp, "loss_intent": i, "loss_speech": sp}
    else:
        loss = stage1_loss(model, batch) if stage is Stage.I else stage2_loss(model, batch)
        rec = {"loss_total": float(loss.data), "loss_intent": 0.0, "loss_speech": 0.0}
    loss.backward()
    opt.step([g for g in groups if g.trainable], lr, lr_scale)
    return rec


def run_curriculum(model: SpeechLM, stages: Sequence[StageConfig], corpus: dict[str, list[Example]],
                   seed: int = 0, on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run the stages in order, carrying parameters forward; returns per-step metrics."""
    order = [s.stage for s in stages]
    if any(b <= a for a, b in zip(order, order[1:])):
        raise ValueError(f"stages must run in order I, II, III; got {[s.name for s in order]}")
    metrics: list[dict] = []
    for k, sc in enumerate(stages):
        model.set_trainable(sc.trainable_groups)
        if sc.steps == 0:
            continue
        sampler = BatchSampler(corpus, sc.data_mix, sc.batch_size, seed * 7919 + k)
        opt = nx.Adam(lr=sc.lr)
        for step in range(sc.steps):
            lr = sc.lr_at(step)
            rec = {"stage": sc.stage.name, "step": step, "lr": lr}
            rec.update(train_step(model, sc.stage, sampler.next(), opt, lr, sc.lr_scale))
            metrics.append(rec)
            if on_step is not None:
                on_step(rec)
    model.set_trainable(())
    return metrics


def write_metrics(metrics: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
